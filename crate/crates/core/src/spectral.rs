//! Spectral encoder primitives: the real 2-D transform pair, the spectral
//! value filter, the Fourier unit, the spectral norm sub-block, and the FFC
//! block that combines three spatial convolution paths with one spectral path.
//!
//! Transform convention: the forward transform is unnormalized and keeps the
//! `W/2 + 1` non-redundant columns of the last axis; the inverse carries the
//! `1/(H·W)` factor, so `inverse(forward(x)) == x`.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::nn::{scoped, BatchNorm2d, Conv2d, MaxPool2d, Mode, Module, NamedBuffers, NamedParams, Relu};
use crate::tensor::{concat_channels, ensure_finite, split_channels, FeatureMap};
use crate::{Error, Result};

/// Half-width spectrum of a real feature map: both planes are `[B, C, H, W/2 + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub real: Array4<f64>,
    pub imag: Array4<f64>,
}

impl Spectrum {
    pub fn zeros(dim: (usize, usize, usize, usize)) -> Self {
        Self {
            real: Array4::zeros(dim),
            imag: Array4::zeros(dim),
        }
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.real.dim()
    }

    /// Sum of squared magnitudes over the stored half spectrum.
    pub fn energy(&self) -> f64 {
        self.real
            .iter()
            .zip(self.imag.iter())
            .map(|(a, b)| a * a + b * b)
            .sum()
    }
}

/// Number of stored columns for a real signal of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of each stored column in the full Hermitian spectrum:
/// 1 for the DC column (and the Nyquist column when `w` is even), 2 otherwise.
pub fn column_multiplicity(w: usize, kw: usize) -> f64 {
    if kw == 0 || (w.is_multiple_of(2) && kw == w / 2) {
        1.0
    } else {
        2.0
    }
}

struct Plans {
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANNERS: RefCell<(RealFftPlanner<f64>, FftPlanner<f64>)> =
        RefCell::new((RealFftPlanner::new(), FftPlanner::new()));
}

fn plans(h: usize, w: usize) -> Plans {
    PLANNERS.with(|p| {
        let (real, complex) = &mut *p.borrow_mut();
        Plans {
            r2c: real.plan_fft_forward(w),
            c2r: real.plan_fft_inverse(w),
            col_fwd: complex.plan_fft_forward(h),
            col_inv: complex.plan_fft_inverse(h),
        }
    })
}

fn rfft2_plane(
    plans: &Plans,
    x: ArrayView2<f64>,
    mut re: ArrayViewMut2<f64>,
    mut im: ArrayViewMut2<f64>,
    work: &mut Array2<Complex64>,
) {
    let (h, w) = x.dim();
    let wf = half_width(w);
    let mut row_in = plans.r2c.make_input_vec();
    let mut row_out = plans.r2c.make_output_vec();
    for m in 0..h {
        for (dst, &v) in row_in.iter_mut().zip(x.row(m).iter()) {
            *dst = v;
        }
        plans
            .r2c
            .process(&mut row_in, &mut row_out)
            .expect("buffer lengths come from the plan");
        for (dst, &v) in work.row_mut(m).iter_mut().zip(row_out.iter()) {
            *dst = v;
        }
    }
    let mut col = vec![Complex64::default(); h];
    for kw in 0..wf {
        for (dst, v) in col.iter_mut().zip(work.column(kw).iter()) {
            *dst = *v;
        }
        plans.col_fwd.process(&mut col);
        for (kh, v) in col.iter().enumerate() {
            re[[kh, kw]] = v.re;
            im[[kh, kw]] = v.im;
        }
    }
}

fn irfft2_plane(
    plans: &Plans,
    re: ArrayView2<f64>,
    im: ArrayView2<f64>,
    mut out: ArrayViewMut2<f64>,
    work: &mut Array2<Complex64>,
) {
    let (h, w) = out.dim();
    let wf = half_width(w);
    let mut col = vec![Complex64::default(); h];
    for kw in 0..wf {
        for kh in 0..h {
            col[kh] = Complex64::new(re[[kh, kw]], im[[kh, kw]]);
        }
        plans.col_inv.process(&mut col);
        for (kh, v) in col.iter().enumerate() {
            work[[kh, kw]] = *v;
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut row_in = plans.c2r.make_input_vec();
    let mut row_out = plans.c2r.make_output_vec();
    for m in 0..h {
        for (dst, v) in row_in.iter_mut().zip(work.row(m).iter()) {
            *dst = *v;
        }
        // The real inverse reads only the real part of the self-conjugate columns.
        row_in[0].im = 0.0;
        if w % 2 == 0 {
            row_in[wf - 1].im = 0.0;
        }
        plans
            .c2r
            .process(&mut row_in, &mut row_out)
            .expect("self-conjugate columns were made real");
        for (dst, &v) in out.row_mut(m).iter_mut().zip(row_out.iter()) {
            *dst = v * scale;
        }
    }
}

/// Unnormalized real-input 2-D transform over the last two axes.
pub fn fft2_real(x: &FeatureMap) -> Result<Spectrum> {
    ensure_finite(x, "fft2_real input")?;
    Ok(fft2_real_unchecked(x))
}

fn fft2_real_unchecked(x: &FeatureMap) -> Spectrum {
    let (b, c, h, w) = x.dim();
    let mut s = Spectrum::zeros((b, c, h, half_width(w)));
    if b * c * h * w == 0 {
        return s;
    }
    let plans = plans(h, w);
    let mut work = Array2::<Complex64>::zeros((h, half_width(w)));
    for bi in 0..b {
        for ci in 0..c {
            rfft2_plane(
                &plans,
                x.slice(ndarray::s![bi, ci, .., ..]),
                s.real.slice_mut(ndarray::s![bi, ci, .., ..]),
                s.imag.slice_mut(ndarray::s![bi, ci, .., ..]),
                &mut work,
            );
        }
    }
    s
}

/// Inverse of [`fft2_real`], returning a real map of spatial size `h × w`.
pub fn inverse_fft2_real(s: &Spectrum, h: usize, w: usize) -> Result<FeatureMap> {
    let (b, c, sh, sw) = s.dim();
    if s.imag.dim() != s.real.dim() || sh != h || sw != half_width(w) {
        return Err(Error::Dimension(format!(
            "spectrum {:?} is inconsistent with a {h}x{w} output",
            s.dim()
        )));
    }
    let mut out = FeatureMap::zeros((b, c, h, w));
    if b * c * h * w == 0 {
        return Ok(out);
    }
    let plans = plans(h, w);
    let mut work = Array2::<Complex64>::zeros((h, half_width(w)));
    for bi in 0..b {
        for ci in 0..c {
            irfft2_plane(
                &plans,
                s.real.slice(ndarray::s![bi, ci, .., ..]),
                s.imag.slice(ndarray::s![bi, ci, .., ..]),
                out.slice_mut(ndarray::s![bi, ci, .., ..]),
                &mut work,
            );
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss w.r.t. the input of [`fft2_real`], given its
/// gradient w.r.t. the real and imaginary planes of the output.
pub fn fft2_real_adjoint(grad: &Spectrum, h: usize, w: usize) -> Result<FeatureMap> {
    let mut g = grad.clone();
    for kw in 0..g.dim().3 {
        let inv = 1.0 / column_multiplicity(w, kw);
        g.real.index_axis_mut(Axis(3), kw).mapv_inplace(|v| v * inv);
        g.imag.index_axis_mut(Axis(3), kw).mapv_inplace(|v| v * inv);
    }
    let mut x = inverse_fft2_real(&g, h, w)?;
    x *= (h * w) as f64;
    Ok(x)
}

/// Gradient w.r.t. the spectrum fed to [`inverse_fft2_real`], given the
/// gradient w.r.t. its real output.
pub fn inverse_fft2_real_adjoint(grad: &FeatureMap) -> Spectrum {
    let (_, _, h, w) = grad.dim();
    let mut s = fft2_real_unchecked(grad);
    let norm = (h * w) as f64;
    for kw in 0..s.dim().3 {
        let f = column_multiplicity(w, kw) / norm;
        s.real.index_axis_mut(Axis(3), kw).mapv_inplace(|v| v * f);
        s.imag.index_axis_mut(Axis(3), kw).mapv_inplace(|v| v * f);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    None,
    Keep,
    Remove,
}

/// Elementwise clamp applied to spectral values (both planes).
///
/// * `keep(a)`: every value clamped into `[-a, a]`.
/// * `remove(a)`: values in `(-a, 0]` become `-a`, values in `(0, a)` become `a`;
///   values with `|v| >= a` pass unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFilter {
    pub mode: FilterMode,
    pub bound: f64,
}

impl Default for FrequencyFilter {
    fn default() -> Self {
        Self::none()
    }
}

impl FrequencyFilter {
    pub fn none() -> Self {
        Self {
            mode: FilterMode::None,
            bound: 0.0,
        }
    }

    pub fn keep(bound: f64) -> Self {
        Self {
            mode: FilterMode::Keep,
            bound,
        }
    }

    pub fn remove(bound: f64) -> Self {
        Self {
            mode: FilterMode::Remove,
            bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != FilterMode::None && !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Config(format!(
                "frequency filter bound must be positive, got {}",
                self.bound
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply_value(&self, v: f64) -> f64 {
        let a = self.bound;
        match self.mode {
            FilterMode::None => v,
            FilterMode::Keep => v.clamp(-a, a),
            FilterMode::Remove => {
                if v > -a && v <= 0.0 {
                    -a
                } else if v > 0.0 && v < a {
                    a
                } else {
                    v
                }
            }
        }
    }

    /// Whether the local derivative of [`Self::apply_value`] at `v` is 1 (else 0).
    #[inline]
    pub fn passes_gradient(&self, v: f64) -> bool {
        let a = self.bound;
        match self.mode {
            FilterMode::None => true,
            FilterMode::Keep => v.abs() <= a,
            FilterMode::Remove => v.abs() >= a,
        }
    }

    /// Short row label, e.g. `none`, `keep(10)`, `remove(10)`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FrequencyFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            FilterMode::None => write!(f, "none"),
            FilterMode::Keep => write!(f, "keep({})", self.bound),
            FilterMode::Remove => write!(f, "remove({})", self.bound),
        }
    }
}

/// Applies `filter` to both planes of `s`.
pub fn apply_frequency_filter(s: &Spectrum, filter: &FrequencyFilter) -> Spectrum {
    if filter.mode == FilterMode::None {
        return s.clone();
    }
    Spectrum {
        real: s.real.mapv(|v| filter.apply_value(v)),
        imag: s.imag.mapv(|v| filter.apply_value(v)),
    }
}

/// Number of leading channels routed to the global side: `round(alpha · c)`,
/// with halves rounded up.
pub fn global_channel_count(channels: usize, alpha: f64) -> usize {
    ((alpha * channels as f64) + 0.5).floor().min(channels as f64) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Splits `x` into `(global, local)` with `round(alpha · C)` leading channels global.
pub fn channel_split(x: &FeatureMap, alpha: f64) -> Result<(FeatureMap, FeatureMap)> {
    check_alpha(alpha)?;
    Ok(split_channels(x, global_channel_count(x.dim().1, alpha)))
}

#[derive(Clone, Debug)]
struct FourierCache {
    keep_real: Array4<bool>,
    keep_imag: Array4<bool>,
    height: usize,
    width: usize,
}

/// FFT → filter → stack real/imag along channels → 1×1 conv → norm → ReLU →
/// unstack → inverse FFT. Output shape equals input shape.
#[derive(Clone, Debug)]
pub struct FourierUnit {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
    pub activation: Option<Relu>,
    pub filter: FrequencyFilter,
    channels: usize,
    cache: Option<FourierCache>,
}

impl FourierUnit {
    pub fn new<R: Rng + ?Sized>(channels: usize, filter: FrequencyFilter, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(2 * channels, 2 * channels, 1, false, rng),
            norm: Some(BatchNorm2d::new(2 * channels)),
            activation: Some(Relu::new()),
            filter,
            channels,
            cache: None,
        }
    }

    /// Variant with normalization and activation removed, leaving
    /// transform → filter → 1×1 conv → inverse transform.
    pub fn without_norm_and_activation<R: Rng + ?Sized>(
        channels: usize,
        filter: FrequencyFilter,
        rng: &mut R,
    ) -> Self {
        let mut unit = Self::new(channels, filter, rng);
        unit.norm = None;
        unit.activation = None;
        unit
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let (_, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "Fourier unit expects {} channels, got {c}",
                self.channels
            )));
        }
        let raw = fft2_real(x)?;
        let spec = apply_frequency_filter(&raw, &self.filter);
        if mode == Mode::Train {
            self.cache = Some(FourierCache {
                keep_real: raw.real.mapv(|v| self.filter.passes_gradient(v)),
                keep_imag: raw.imag.mapv(|v| self.filter.passes_gradient(v)),
                height: h,
                width: w,
            });
        }
        let stacked = concat_channels(&spec.real, &spec.imag)?;
        let mut y = self.conv.forward(&stacked, mode)?;
        if let Some(norm) = &mut self.norm {
            y = norm.forward(&y, mode)?;
        }
        if let Some(act) = &mut self.activation {
            y = act.forward(&y, mode);
        }
        let (real, imag) = split_channels(&y, self.channels);
        let out = inverse_fft2_real(&Spectrum { real, imag }, h, w)?;
        ensure_finite(&out, "Fourier unit output")?;
        Ok(out)
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let gs = inverse_fft2_real_adjoint(grad);
        let mut g = concat_channels(&gs.real, &gs.imag).expect("planes share a shape");
        if let Some(act) = &mut self.activation {
            g = act.backward(&g);
        }
        if let Some(norm) = &mut self.norm {
            g = norm.backward(&g);
        }
        let g = self.conv.backward(&g);
        let (mut real, mut imag) = split_channels(&g, self.channels);
        let cache = self
            .cache
            .as_ref()
            .expect("Fourier unit backward without a training forward pass");
        Zip::from(&mut real).and(&cache.keep_real).for_each(|g, &k| {
            if !k {
                *g = 0.0;
            }
        });
        Zip::from(&mut imag).and(&cache.keep_imag).for_each(|g, &k| {
            if !k {
                *g = 0.0;
            }
        });
        fft2_real_adjoint(&Spectrum { real, imag }, cache.height, cache.width)
            .expect("gradient spectrum matches the cached input")
    }
}

impl Module for FourierUnit {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        self.conv.params(&scoped(scope, "conv"), out);
        if let Some(n) = &mut self.norm {
            n.params(&scoped(scope, "norm"), out);
        }
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        if let Some(n) = &mut self.norm {
            n.buffers(&scoped(scope, "norm"), out);
        }
    }
}

/// The spectral path of an FFC block.
///
/// `x'' = ReLU(BN(conv_in(x_g)))`; the leading `round(α·C)` channels of `x''`
/// go through the global Fourier unit and the rest through the local one;
/// the output is `conv_out(x'' + concat(FU_g, FU_l))`.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub alpha: f64,
    pub conv_in: Conv2d,
    pub norm_in: BatchNorm2d,
    pub act_in: Relu,
    pub fu_global: Option<FourierUnit>,
    pub fu_local: Option<FourierUnit>,
    pub conv_out: Conv2d,
    split: usize,
}

impl SpectralNorm {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        alpha: f64,
        filter: FrequencyFilter,
        rng: &mut R,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        filter.validate()?;
        let conv_in = Conv2d::new(in_channels, out_channels, 1, false, rng);
        let split = global_channel_count(out_channels, alpha);
        let fu_global = (split > 0).then(|| FourierUnit::new(split, filter, rng));
        let fu_local =
            (out_channels > split).then(|| FourierUnit::new(out_channels - split, filter, rng));
        let conv_out = Conv2d::new(out_channels, out_channels, 1, false, rng);
        Ok(Self {
            alpha,
            conv_in,
            norm_in: BatchNorm2d::new(out_channels),
            act_in: Relu::new(),
            fu_global,
            fu_local,
            conv_out,
            split,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv_out.out_channels()
    }

    /// Channels routed to the global Fourier unit.
    pub fn global_split(&self) -> usize {
        self.split
    }

    pub fn forward(&mut self, x_g: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let h = self.conv_in.forward(x_g, mode)?;
        let h = self.norm_in.forward(&h, mode)?;
        let mut mixed = self.act_in.forward(&h, mode);
        let (g, l) = split_channels(&mixed, self.split);
        let fg = match &mut self.fu_global {
            Some(fu) => fu.forward(&g, mode)?,
            None => g,
        };
        let fl = match &mut self.fu_local {
            Some(fu) => fu.forward(&l, mode)?,
            None => l,
        };
        mixed += &concat_channels(&fg, &fl)?;
        self.conv_out.forward(&mixed, mode)
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let mut d_mixed = self.conv_out.backward(grad);
        let (dg, dl) = split_channels(&d_mixed, self.split);
        let dg = match &mut self.fu_global {
            Some(fu) => fu.backward(&dg),
            None => dg,
        };
        let dl = match &mut self.fu_local {
            Some(fu) => fu.backward(&dl),
            None => dl,
        };
        d_mixed += &concat_channels(&dg, &dl).expect("split halves share spatial dims");
        let d = self.act_in.backward(&d_mixed);
        let d = self.norm_in.backward(&d);
        self.conv_in.backward(&d)
    }
}

impl Module for SpectralNorm {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        self.conv_in.params(&scoped(scope, "conv_in"), out);
        self.norm_in.params(&scoped(scope, "norm_in"), out);
        if let Some(fu) = &mut self.fu_global {
            fu.params(&scoped(scope, "fu_global"), out);
        }
        if let Some(fu) = &mut self.fu_local {
            fu.params(&scoped(scope, "fu_local"), out);
        }
        self.conv_out.params(&scoped(scope, "conv_out"), out);
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        self.norm_in.buffers(&scoped(scope, "norm_in"), out);
        if let Some(fu) = &mut self.fu_global {
            fu.buffers(&scoped(scope, "fu_global"), out);
        }
        if let Some(fu) = &mut self.fu_local {
            fu.buffers(&scoped(scope, "fu_local"), out);
        }
    }
}

/// Channel layout and spectral settings of one FFC block.
#[derive(Clone, Copy, Debug)]
pub struct FfcLayout {
    pub in_local: usize,
    pub in_global: usize,
    pub out_local: usize,
    pub out_global: usize,
    pub kernel: usize,
    pub alpha: f64,
    pub filter: FrequencyFilter,
}

/// Output side of one FFC path: normalization, ReLU and 2× max pooling.
#[derive(Clone, Debug)]
struct PathTail {
    norm: BatchNorm2d,
    act: Relu,
    pool: MaxPool2d,
}

impl PathTail {
    fn new(channels: usize) -> Self {
        Self {
            norm: BatchNorm2d::new(channels),
            act: Relu::new(),
            pool: MaxPool2d::new(),
        }
    }

    fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let y = self.norm.forward(x, mode)?;
        let y = self.act.forward(&y, mode);
        self.pool.forward(&y, mode)
    }

    fn backward(&mut self, g: &FeatureMap) -> FeatureMap {
        let g = self.pool.backward(g);
        let g = self.act.backward(&g);
        self.norm.backward(&g)
    }
}

/// Fast Fourier convolution block.
///
/// Local pre-activation: `conv_l2l(x_l) + conv_g2l(x_g)`.
/// Global pre-activation: `conv_l2g(x_l) + spectral_norm(x_g)`.
/// Each side then passes batch norm, ReLU and 2× max pooling. Paths whose
/// input or output side has zero channels are absent.
#[derive(Clone, Debug)]
pub struct FfcBlock {
    pub conv_l2l: Option<Conv2d>,
    pub conv_l2g: Option<Conv2d>,
    pub conv_g2l: Option<Conv2d>,
    pub spectral_norm: Option<SpectralNorm>,
    layout: FfcLayout,
    tail_local: Option<PathTail>,
    tail_global: Option<PathTail>,
    input_hw: (usize, usize, usize),
}

impl FfcBlock {
    pub fn new<R: Rng + ?Sized>(layout: FfcLayout, rng: &mut R) -> Result<Self> {
        let k = layout.kernel;
        let conv = |cin: usize, cout: usize, rng: &mut R| {
            (cin > 0 && cout > 0).then(|| Conv2d::new(cin, cout, k, false, rng))
        };
        let conv_l2l = conv(layout.in_local, layout.out_local, rng);
        let conv_l2g = conv(layout.in_local, layout.out_global, rng);
        let conv_g2l = conv(layout.in_global, layout.out_local, rng);
        let spectral_norm = if layout.in_global > 0 && layout.out_global > 0 {
            Some(SpectralNorm::new(
                layout.in_global,
                layout.out_global,
                layout.alpha,
                layout.filter,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            conv_l2l,
            conv_l2g,
            conv_g2l,
            spectral_norm,
            tail_local: (layout.out_local > 0).then(|| PathTail::new(layout.out_local)),
            tail_global: (layout.out_global > 0).then(|| PathTail::new(layout.out_global)),
            layout,
            input_hw: (0, 0, 0),
        })
    }

    pub fn layout(&self) -> &FfcLayout {
        &self.layout
    }

    pub fn forward(
        &mut self,
        x_l: &FeatureMap,
        x_g: &FeatureMap,
        mode: Mode,
    ) -> Result<(FeatureMap, FeatureMap)> {
        let (b, cl, h, w) = x_l.dim();
        let (bg, cg, hg, wg) = x_g.dim();
        if (b, h, w) != (bg, hg, wg) {
            return Err(Error::Dimension(format!(
                "local {:?} and global {:?} features disagree",
                x_l.dim(),
                x_g.dim()
            )));
        }
        if cl != self.layout.in_local || cg != self.layout.in_global {
            return Err(Error::Dimension(format!(
                "FFC block expects ({}, {}) channels, got ({cl}, {cg})",
                self.layout.in_local, self.layout.in_global
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "FFC block pools by 2 and needs even spatial dims, got {h}x{w}"
            )));
        }
        self.input_hw = (b, h, w);

        let mut pre_l = FeatureMap::zeros((b, self.layout.out_local, h, w));
        let mut pre_g = FeatureMap::zeros((b, self.layout.out_global, h, w));
        if let Some(c) = &mut self.conv_l2l {
            pre_l += &c.forward(x_l, mode)?;
        }
        if let Some(c) = &mut self.conv_g2l {
            pre_l += &c.forward(x_g, mode)?;
        }
        if let Some(c) = &mut self.conv_l2g {
            pre_g += &c.forward(x_l, mode)?;
        }
        if let Some(s) = &mut self.spectral_norm {
            pre_g += &s.forward(x_g, mode)?;
        }
        let out_l = match &mut self.tail_local {
            Some(t) => t.forward(&pre_l, mode)?,
            None => FeatureMap::zeros((b, 0, h / 2, w / 2)),
        };
        let out_g = match &mut self.tail_global {
            Some(t) => t.forward(&pre_g, mode)?,
            None => FeatureMap::zeros((b, 0, h / 2, w / 2)),
        };
        Ok((out_l, out_g))
    }

    /// Returns gradients w.r.t. `(x_l, x_g)`.
    pub fn backward(&mut self, grad_l: &FeatureMap, grad_g: &FeatureMap) -> (FeatureMap, FeatureMap) {
        let (b, h, w) = self.input_hw;
        let d_pre_l = self.tail_local.as_mut().map(|t| t.backward(grad_l));
        let d_pre_g = self.tail_global.as_mut().map(|t| t.backward(grad_g));
        let mut dx_l = FeatureMap::zeros((b, self.layout.in_local, h, w));
        let mut dx_g = FeatureMap::zeros((b, self.layout.in_global, h, w));
        if let Some(d) = &d_pre_l {
            if let Some(c) = &mut self.conv_l2l {
                dx_l += &c.backward(d);
            }
            if let Some(c) = &mut self.conv_g2l {
                dx_g += &c.backward(d);
            }
        }
        if let Some(d) = &d_pre_g {
            if let Some(c) = &mut self.conv_l2g {
                dx_l += &c.backward(d);
            }
            if let Some(s) = &mut self.spectral_norm {
                dx_g += &s.backward(d);
            }
        }
        (dx_l, dx_g)
    }
}

impl Module for FfcBlock {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>) {
        if let Some(c) = &mut self.conv_l2l {
            c.params(&scoped(scope, "conv_l2l"), out);
        }
        if let Some(c) = &mut self.conv_l2g {
            c.params(&scoped(scope, "conv_l2g"), out);
        }
        if let Some(c) = &mut self.conv_g2l {
            c.params(&scoped(scope, "conv_g2l"), out);
        }
        if let Some(s) = &mut self.spectral_norm {
            s.params(&scoped(scope, "spectral_norm"), out);
        }
        if let Some(t) = &mut self.tail_local {
            t.norm.params(&scoped(scope, "norm_local"), out);
        }
        if let Some(t) = &mut self.tail_global {
            t.norm.params(&scoped(scope, "norm_global"), out);
        }
    }

    fn buffers<'a>(&'a mut self, scope: &str, out: &mut NamedBuffers<'a>) {
        if let Some(s) = &mut self.spectral_norm {
            s.buffers(&scoped(scope, "spectral_norm"), out);
        }
        if let Some(t) = &mut self.tail_local {
            t.norm.buffers(&scoped(scope, "norm_local"), out);
        }
        if let Some(t) = &mut self.tail_global {
            t.norm.buffers(&scoped(scope, "norm_global"), out);
        }
    }
}
