//! Dense TV-L1 optical flow with a Huber-smoothed TV regularizer.
//!
//! The solver runs coarse-to-fine over a Gaussian pyramid. At every scale the
//! second image is warped towards the first by the current estimate, the
//! brightness-constancy residual is linearized, and a primal-dual
//! projected-gradient iteration minimizes
//!
//! ```text
//! E(u) = sum_d H_eps(|grad u_d|) + lambda * |I1(x + u) - I0(x)|
//! ```
//!
//! where `H_eps` is the Huber norm. A 3x3 median filter is applied to the flow
//! after each warp. All per-pixel updates are row-partitioned with no
//! cross-row reductions, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{divergence_backward, gradient_forward, reduce, Frame};

/// Intensities are multiplied by this before the data term is formed, so the
/// data weight keeps its customary 8-bit meaning.
const INTENSITY_SCALE: f32 = 255.0;

/// Smallest side length the automatic scale count allows at the coarsest scale.
const MIN_COARSE_DIM: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{scales} scales of a {width}x{height} image shrink below 2x2")]
    TooSmall { width: usize, height: usize, scales: usize },
    #[error("invalid flow parameter: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Weight of the L1 data term (lambda), relative to 8-bit intensities.
    pub data_weight: f32,
    pub huber_epsilon: f32,
    /// Primal step tau; the dual step is `1 / (8 tau)`.
    pub time_step: f32,
    pub warps_per_level: usize,
    pub iterations_per_warp: usize,
    /// Number of pyramid scales, `None` picks as many as keep the coarsest
    /// side at or above 16 pixels.
    pub pyramid_scales: Option<usize>,
    pub median_filter: bool,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            data_weight: 0.15,
            huber_epsilon: 0.01,
            time_step: 0.25,
            warps_per_level: 5,
            iterations_per_warp: 50,
            pyramid_scales: None,
            median_filter: true,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.data_weight > 0.0 && self.data_weight.is_finite()) {
            return Err(FlowError::InvalidParams("data_weight must be positive"));
        }
        if !(self.huber_epsilon >= 0.0 && self.huber_epsilon.is_finite()) {
            return Err(FlowError::InvalidParams("huber_epsilon must be non-negative"));
        }
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(FlowError::InvalidParams("time_step must be positive"));
        }
        if self.warps_per_level == 0 {
            return Err(FlowError::InvalidParams("warps_per_level must be at least 1"));
        }
        if self.iterations_per_warp == 0 {
            return Err(FlowError::InvalidParams("iterations_per_warp must be at least 1"));
        }
        if self.pyramid_scales == Some(0) {
            return Err(FlowError::InvalidParams("pyramid_scales must be at least 1"));
        }
        Ok(())
    }

    fn scales_for(&self, width: usize, height: usize) -> Result<usize, FlowError> {
        match self.pyramid_scales {
            Some(n) => {
                let shift = n - 1;
                if shift >= usize::BITS as usize || (width >> shift) < 2 || (height >> shift) < 2 {
                    return Err(FlowError::TooSmall { width, height, scales: n });
                }
                Ok(n)
            }
            None => {
                let short = width.min(height);
                let mut n = 1;
                while (short >> n) >= MIN_COARSE_DIM {
                    n += 1;
                }
                Ok(n)
            }
        }
    }
}

/// Per-pixel displacement from the first frame to the second: the first frame
/// at `p` corresponds to the second frame at `p + (dx, dy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
    /// Frame indices `(from, to)` the field was computed for.
    pair: Option<(u64, u64)>,
}

impl MotionField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, dx: vec![0.0; width * height], dy: vec![0.0; width * height], pair: None }
    }

    pub fn uniform(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        Self { width, height, dx: vec![dx; width * height], dy: vec![dy; width * height], pair: None }
    }

    pub fn from_components(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self, FlowError> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(FlowError::InvalidParams("component length does not match dimensions"));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(FlowError::InvalidParams("non-finite displacement"));
        }
        Ok(Self { width, height, dx, dy, pair: None })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut field = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                field.dx[y * width + x] = a;
                field.dy[y * width + x] = b;
            }
        }
        field
    }

    pub fn with_pair(mut self, from: u64, to: u64) -> Self {
        self.pair = Some((from, to));
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn pair(&self) -> Option<(u64, u64)> {
        self.pair
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn stats(&self) -> FieldStats {
        let mut sum = 0f64;
        let mut max = 0f64;
        let (mut sx, mut sy) = (0f64, 0f64);
        for (&a, &b) in self.dx.iter().zip(&self.dy) {
            let m = (a as f64).hypot(b as f64);
            sum += m;
            max = max.max(m);
            sx += a as f64;
            sy += b as f64;
        }
        let n = self.dx.len().max(1) as f64;
        FieldStats { mean_magnitude: sum / n, max_magnitude: max, mean_dx: sx / n, mean_dy: sy / n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean_magnitude: f64,
    pub max_magnitude: f64,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

/// Energy after every warp at the finest scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowTrace {
    pub finest_energies: Vec<f64>,
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![0.0; w * h] }
    }

    fn reduce(&self) -> Self {
        let (data, w, h) = reduce(&self.data, self.w, self.h);
        Self { w, h, data }
    }
}

#[inline]
fn bilinear(data: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn warp_plane(src: &Plane, u1: &[f32], u2: &[f32], out: &mut [f32]) {
    let (w, h) = (src.w, src.h);
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            *o = bilinear(&src.data, w, h, x as f32 + u1[i], y as f32 + u2[i]);
        }
    });
}

/// Bilinear backward warp: `output(p) = image(p + field(p))`, sampling
/// positions clamped to the image border.
pub fn warp_image(image: &Frame, field: &MotionField) -> Result<Frame, FlowError> {
    if image.width() != field.width || image.height() != field.height {
        return Err(FlowError::DimensionMismatch(image.width(), image.height(), field.width, field.height));
    }
    let src = Plane { w: image.width(), h: image.height(), data: image.data().to_vec() };
    let mut out = vec![0f32; src.data.len()];
    warp_plane(&src, &field.dx, &field.dy, &mut out);
    Ok(Frame::new(image.width(), image.height(), image.index(), out).expect("bilinear samples stay in range"))
}

/// Central differences, one-sided at the border.
fn central_gradient(src: &Plane) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (src.w, src.h);
    let d = &src.data;
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = match x {
                0 => d[i + 1] - d[i],
                _ if x + 1 == w => d[i] - d[i - 1],
                _ => 0.5 * (d[i + 1] - d[i - 1]),
            };
            gy[i] = match y {
                0 => d[i + w] - d[i],
                _ if y + 1 == h => d[i] - d[i - w],
                _ => 0.5 * (d[i + w] - d[i - w]),
            };
        }
    }
    (gx, gy)
}

fn median3x3(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut win = [0f32; 9];
        for (x, o) in row.iter_mut().enumerate() {
            let mut k = 0;
            for dy in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    win[k] = src[yy * w + xx];
                    k += 1;
                }
            }
            win.sort_unstable_by(|a, b| a.total_cmp(b));
            *o = win[4];
        }
    });
    out
}

/// Bilinear upsampling of a flow component onto a `w x h` grid, displacements
/// doubled. Coarse sample `i` sits at fine position `2i`.
fn upsample(src: &[f32], sw: usize, sh: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = 2.0 * bilinear(src, sw, sh, x as f32 * 0.5, y as f32 * 0.5);
        }
    });
    out
}

#[inline]
fn huber(t: f64, eps: f64) -> f64 {
    if t <= eps {
        if eps > 0.0 {
            t * t / (2.0 * eps)
        } else {
            0.0
        }
    } else {
        t - 0.5 * eps
    }
}

fn energy(i0: &Plane, i1: &Plane, u1: &[f32], u2: &[f32], params: &FlowParams) -> f64 {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let eps = params.huber_epsilon as f64;
    let mut gx = vec![0f32; n];
    let mut gy = vec![0f32; n];
    let mut reg = 0f64;
    for comp in [u1, u2] {
        gradient_forward(comp, w, h, &mut gx, &mut gy);
        reg += gx.iter().zip(&gy).map(|(&a, &b)| huber((a as f64).hypot(b as f64), eps)).sum::<f64>();
    }
    let mut warped = vec![0f32; n];
    warp_plane(i1, u1, u2, &mut warped);
    let data: f64 = warped.iter().zip(&i0.data).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    reg + params.data_weight as f64 * data
}

/// TV-L1 energy of `field` for the pair, evaluated at full resolution.
pub fn flow_energy(prev: &Frame, curr: &Frame, field: &MotionField, params: &FlowParams) -> Result<f64, FlowError> {
    check_dims(prev, curr)?;
    if field.width != prev.width() || field.height != prev.height() {
        return Err(FlowError::DimensionMismatch(prev.width(), prev.height(), field.width, field.height));
    }
    let i0 = scaled_plane(prev);
    let i1 = scaled_plane(curr);
    Ok(energy(&i0, &i1, &field.dx, &field.dy, params))
}

fn scaled_plane(frame: &Frame) -> Plane {
    Plane {
        w: frame.width(),
        h: frame.height(),
        data: frame.data().iter().map(|&v| v * INTENSITY_SCALE).collect(),
    }
}

fn check_dims(prev: &Frame, curr: &Frame) -> Result<(), FlowError> {
    if prev.width() != curr.width() || prev.height() != curr.height() {
        return Err(FlowError::DimensionMismatch(prev.width(), prev.height(), curr.width(), curr.height()));
    }
    Ok(())
}

pub fn compute_flow(prev: &Frame, curr: &Frame, params: &FlowParams) -> Result<MotionField, FlowError> {
    solve(prev, curr, params, false).map(|(field, _)| field)
}

/// Like [`compute_flow`], also returning the finest-scale energy after each warp.
pub fn compute_flow_traced(
    prev: &Frame,
    curr: &Frame,
    params: &FlowParams,
) -> Result<(MotionField, FlowTrace), FlowError> {
    solve(prev, curr, params, true)
}

struct Solver<'a> {
    params: &'a FlowParams,
    w: usize,
    h: usize,
    u1: Vec<f32>,
    u2: Vec<f32>,
    // dual variables, (x, y) components for each flow component
    p11: Vec<f32>,
    p12: Vec<f32>,
    p21: Vec<f32>,
    p22: Vec<f32>,
}

impl Solver<'_> {
    fn warp_iteration(&mut self, i0: &Plane, i1: &Plane, i1x: &Plane, i1y: &Plane) {
        let (w, h) = (self.w, self.h);
        let n = w * h;
        let lambda = self.params.data_weight;
        let tau = self.params.time_step;
        let sigma = 1.0 / (8.0 * tau);
        let eps = self.params.huber_epsilon;
        let lt = lambda * tau;

        let mut warped = vec![0f32; n];
        let mut ix = vec![0f32; n];
        let mut iy = vec![0f32; n];
        warp_plane(i1, &self.u1, &self.u2, &mut warped);
        warp_plane(i1x, &self.u1, &self.u2, &mut ix);
        warp_plane(i1y, &self.u1, &self.u2, &mut iy);
        // the clamped warp is flat in any direction that leaves the image
        let (xmax, ymax) = ((w - 1) as f32, (h - 1) as f32);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f32 + self.u1[i];
                let sy = y as f32 + self.u2[i];
                if !(0.0..=xmax).contains(&sx) {
                    ix[i] = 0.0;
                }
                if !(0.0..=ymax).contains(&sy) {
                    iy[i] = 0.0;
                }
            }
        }

        // rho(u) = rho_c + ix * u1 + iy * u2
        let rho_c: Vec<f32> = (0..n)
            .map(|i| warped[i] - ix[i] * self.u1[i] - iy[i] * self.u2[i] - i0.data[i])
            .collect();
        let grad2: Vec<f32> = (0..n).map(|i| ix[i] * ix[i] + iy[i] * iy[i]).collect();

        let mut ubar1 = self.u1.clone();
        let mut ubar2 = self.u2.clone();
        let mut g1x = vec![0f32; n];
        let mut g1y = vec![0f32; n];
        let mut g2x = vec![0f32; n];
        let mut g2y = vec![0f32; n];
        let mut div1 = vec![0f32; n];
        let mut div2 = vec![0f32; n];

        for _ in 0..self.params.iterations_per_warp {
            // dual ascent with Huber damping, then projection onto the unit ball
            gradient_forward(&ubar1, w, h, &mut g1x, &mut g1y);
            gradient_forward(&ubar2, w, h, &mut g2x, &mut g2y);
            let damp = 1.0 / (1.0 + sigma * eps);
            for (p, q, gx, gy) in [
                (&mut self.p11, &mut self.p12, &g1x, &g1y),
                (&mut self.p21, &mut self.p22, &g2x, &g2y),
            ] {
                p.par_chunks_mut(w)
                    .zip(q.par_chunks_mut(w))
                    .zip(gx.par_chunks(w).zip(gy.par_chunks(w)))
                    .for_each(|((pr, qr), (gxr, gyr))| {
                        for x in 0..pr.len() {
                            let a = (pr[x] + sigma * gxr[x]) * damp;
                            let b = (qr[x] + sigma * gyr[x]) * damp;
                            let norm = (a * a + b * b).sqrt().max(1.0);
                            pr[x] = a / norm;
                            qr[x] = b / norm;
                        }
                    });
            }

            // primal descent followed by the pointwise L1 data proximal step
            divergence_backward(&self.p11, &self.p12, w, h, &mut div1);
            divergence_backward(&self.p21, &self.p22, w, h, &mut div2);
            self.u1
                .par_chunks_mut(w)
                .zip(self.u2.par_chunks_mut(w))
                .zip(ubar1.par_chunks_mut(w).zip(ubar2.par_chunks_mut(w)))
                .enumerate()
                .for_each(|(y, ((u1r, u2r), (b1r, b2r)))| {
                    for x in 0..w {
                        let i = y * w + x;
                        let old1 = u1r[x];
                        let old2 = u2r[x];
                        let mut v1 = old1 + tau * div1[i];
                        let mut v2 = old2 + tau * div2[i];
                        let rho = rho_c[i] + ix[i] * v1 + iy[i] * v2;
                        let th = lt * grad2[i];
                        if rho < -th {
                            v1 += lt * ix[i];
                            v2 += lt * iy[i];
                        } else if rho > th {
                            v1 -= lt * ix[i];
                            v2 -= lt * iy[i];
                        } else if grad2[i] > 1e-9 {
                            v1 -= rho * ix[i] / grad2[i];
                            v2 -= rho * iy[i] / grad2[i];
                        }
                        u1r[x] = v1;
                        u2r[x] = v2;
                        b1r[x] = 2.0 * v1 - old1;
                        b2r[x] = 2.0 * v2 - old2;
                    }
                });
        }

        if self.params.median_filter {
            self.u1 = median3x3(&self.u1, w, h);
            self.u2 = median3x3(&self.u2, w, h);
        }
    }
}

fn solve(prev: &Frame, curr: &Frame, params: &FlowParams, trace: bool) -> Result<(MotionField, FlowTrace), FlowError> {
    params.validate()?;
    check_dims(prev, curr)?;
    let (width, height) = (prev.width(), prev.height());
    let scales = params.scales_for(width, height)?;

    let mut pyr0 = vec![scaled_plane(prev)];
    let mut pyr1 = vec![scaled_plane(curr)];
    for _ in 1..scales {
        let next0 = pyr0.last().unwrap().reduce();
        let next1 = pyr1.last().unwrap().reduce();
        pyr0.push(next0);
        pyr1.push(next1);
    }

    let mut out_trace = FlowTrace::default();
    let mut flow: Option<(Vec<f32>, Vec<f32>, usize, usize)> = None;
    for s in (0..scales).rev() {
        let (i0, i1) = (&pyr0[s], &pyr1[s]);
        let (w, h) = (i0.w, i0.h);
        let (u1, u2) = match flow.take() {
            Some((c1, c2, cw, ch)) => (upsample(&c1, cw, ch, w, h), upsample(&c2, cw, ch, w, h)),
            None => (vec![0f32; w * h], vec![0f32; w * h]),
        };
        let (gx, gy) = central_gradient(i1);
        let i1x = Plane { w, h, data: gx };
        let i1y = Plane { w, h, data: gy };
        let zero = Plane::zeros(w, h);
        let mut solver = Solver {
            params,
            w,
            h,
            u1,
            u2,
            p11: zero.data.clone(),
            p12: zero.data.clone(),
            p21: zero.data.clone(),
            p22: zero.data,
        };
        for _ in 0..params.warps_per_level {
            solver.warp_iteration(i0, i1, &i1x, &i1y);
            if trace && s == 0 {
                out_trace.finest_energies.push(energy(i0, i1, &solver.u1, &solver.u2, params));
            }
        }
        flow = Some((solver.u1, solver.u2, w, h));
    }

    let (dx, dy, _, _) = flow.expect("at least one scale");
    let field = MotionField { width, height, dx, dy, pair: Some((prev.index(), curr.index())) };
    Ok((field, out_trace))
}
