//! Color-only perturbations used to build training pairs: a parametric
//! filter chain, cube-format 3D LUTs, and their composition.
//!
//! Every transform here is a function of the pixel color alone, so equal
//! input colors always stay equal.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::Image;

/// Rec.709 luma weights.
pub const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];

pub const GAIN_RANGE: (f32, f32) = (0.6, 1.4);
pub const BIAS_RANGE: (f32, f32) = (-0.15, 0.15);
pub const GAMMA_RANGE: (f32, f32) = (0.5, 2.0);
pub const SATURATION_RANGE: (f32, f32) = (0.4, 1.6);
pub const WHITE_BALANCE_RANGE: (f32, f32) = (0.8, 1.25);

const CURVE_X: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("tone curve knots must be strictly increasing in both coordinates")]
    NotIncreasing,
    #[error("tone curve knots must lie in [0, 1]")]
    OutOfRange,
}

/// Monotone piecewise-linear curve through 5 knots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneCurve {
    xs: [f32; 5],
    ys: [f32; 5],
}

impl ToneCurve {
    pub fn new(xs: [f32; 5], ys: [f32; 5]) -> Result<Self, CurveError> {
        if xs.iter().chain(&ys).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CurveError::OutOfRange);
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) || ys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CurveError::NotIncreasing);
        }
        Ok(Self { xs, ys })
    }

    pub fn identity() -> Self {
        Self { xs: CURVE_X, ys: CURVE_X }
    }

    pub fn knots(&self) -> ([f32; 5], [f32; 5]) {
        (self.xs, self.ys)
    }

    pub fn is_identity(&self) -> bool {
        self.xs == self.ys
    }

    /// Linear interpolation between knots, constant extension outside.
    pub fn eval(&self, v: f32) -> f32 {
        if v <= self.xs[0] {
            return self.ys[0];
        }
        for i in 1..5 {
            if v <= self.xs[i] {
                let t = (v - self.xs[i - 1]) / (self.xs[i] - self.xs[i - 1]);
                return self.ys[i - 1] + t * (self.ys[i] - self.ys[i - 1]);
            }
        }
        self.ys[4]
    }

    fn sample(rng: &mut impl Rng) -> Self {
        let mut ys = [0f32; 5];
        ys[0] = rng.gen_range(0.0..0.08);
        for i in 1..4 {
            ys[i] = CURVE_X[i] + rng.gen_range(-0.08..0.08);
        }
        ys[4] = rng.gen_range(0.92..=1.0);
        // interior knots stay within 0.08 of the diagonal, so neighbours
        // are at least 0.09 apart and the end knots stay in [0, 1]
        Self::new(CURVE_X, ys).expect("constructed monotone")
    }
}

/// Parameters of the filter chain. Stages run in field order:
/// white balance, gain/bias, gamma, saturation, tone curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub white_balance: [f32; 3],
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub gamma: f32,
    pub saturation: f32,
    pub curve: ToneCurve,
}

impl FilterParams {
    pub fn identity() -> Self {
        Self {
            white_balance: [1.0; 3],
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            saturation: 1.0,
            curve: ToneCurve::identity(),
        }
    }

    /// Uniform draws within the stated ranges; gamma is log-uniform.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut tri = |(lo, hi): (f32, f32)| -> [f32; 3] {
            [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
        };
        let white_balance = tri(WHITE_BALANCE_RANGE);
        let gain = tri(GAIN_RANGE);
        let bias = tri(BIAS_RANGE);
        let (glo, ghi) = (GAMMA_RANGE.0.ln(), GAMMA_RANGE.1.ln());
        let gamma = rng.gen_range(glo..=ghi).exp().clamp(GAMMA_RANGE.0, GAMMA_RANGE.1);
        let saturation = rng.gen_range(SATURATION_RANGE.0..=SATURATION_RANGE.1);
        let curve = ToneCurve::sample(rng);
        Self { white_balance, gain, bias, gamma, saturation, curve }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f32, (lo, hi): (f32, f32)| (lo..=hi).contains(&v);
        self.white_balance.iter().all(|&v| within(v, WHITE_BALANCE_RANGE))
            && self.gain.iter().all(|&v| within(v, GAIN_RANGE))
            && self.bias.iter().all(|&v| within(v, BIAS_RANGE))
            && within(self.gamma, GAMMA_RANGE)
            && within(self.saturation, SATURATION_RANGE)
    }

    pub fn apply_pixel(&self, px: [f32; 3]) -> [f32; 3] {
        let mut x = px;
        if self.white_balance != [1.0; 3] {
            for c in 0..3 {
                x[c] = unit(x[c] * self.white_balance[c]);
            }
        }
        if self.gain != [1.0; 3] || self.bias != [0.0; 3] {
            for c in 0..3 {
                x[c] = unit(x[c] * self.gain[c] + self.bias[c]);
            }
        }
        if self.gamma != 1.0 {
            for v in &mut x {
                *v = unit(v.powf(self.gamma));
            }
        }
        if self.saturation != 1.0 {
            let l = LUMA[0] * x[0] + LUMA[1] * x[1] + LUMA[2] * x[2];
            for v in &mut x {
                *v = unit(l + self.saturation * (*v - l));
            }
        }
        if !self.curve.is_identity() {
            for v in &mut x {
                *v = unit(self.curve.eval(*v));
            }
        }
        x
    }
}

fn unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn random_filter(seed: u64) -> FilterParams {
    FilterParams::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn apply_filter(image: &Image, params: &FilterParams) -> Image {
    map_colors(image, |px| params.apply_pixel(px))
}

fn map_colors(image: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let y = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&y);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CubeError {
    #[error("line {line}: missing LUT_3D_SIZE before table data")]
    MissingSize { line: usize },
    #[error("line {line}: expected {expected} entries, found {actual}")]
    EntryCount { line: usize, expected: usize, actual: usize },
    #[error("line {line}: non-numeric token {token:?}")]
    BadToken { line: usize, token: String },
    #[error("line {line}: LUT size {size} outside 2..=256")]
    SizeOutOfRange { line: usize, size: i64 },
    #[error("line {line}: expected 3 values per entry, found {found}")]
    BadArity { line: usize, found: usize },
    #[error("line {line}: unsupported keyword {keyword}")]
    Unsupported { line: usize, keyword: String },
    #[error("line {line}: domain max must exceed domain min")]
    BadDomain { line: usize },
}

/// 3D lookup table with red varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut3D {
    level: usize,
    entries: Vec<[f32; 3]>,
    title: Option<String>,
    domain_min: [f32; 3],
    domain_max: [f32; 3],
}

impl Lut3D {
    pub fn new(level: usize, entries: Vec<[f32; 3]>) -> Option<Self> {
        if !(2..=256).contains(&level) || entries.len() != level.pow(3) {
            return None;
        }
        if entries.iter().flatten().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return None;
        }
        Some(Self {
            level,
            entries,
            title: None,
            domain_min: [0.0; 3],
            domain_max: [1.0; 3],
        })
    }

    pub fn identity(level: usize) -> Self {
        let n = level;
        let step = |i: usize| i as f32 / (n - 1) as f32;
        let mut entries = Vec::with_capacity(n * n * n);
        for b in 0..n {
            for g in 0..n {
                for r in 0..n {
                    entries.push([step(r), step(g), step(b)]);
                }
            }
        }
        Self::new(level, entries).expect("valid identity lattice")
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn entries(&self) -> &[[f32; 3]] {
        &self.entries
    }

    pub fn title(&self) -> Option<&str> {
        self.title.as_deref()
    }

    pub fn domain(&self) -> ([f32; 3], [f32; 3]) {
        (self.domain_min, self.domain_max)
    }

    pub fn entry(&self, r: usize, g: usize, b: usize) -> [f32; 3] {
        self.entries[(b * self.level + g) * self.level + r]
    }

    /// Trilinear interpolation on the lattice. Inputs are normalized by the
    /// domain and clamped to it.
    pub fn apply_pixel(&self, px: [f32; 3]) -> [f32; 3] {
        let n = self.level;
        let top = (n - 1) as f32;
        let mut i0 = [0usize; 3];
        let mut f = [0f32; 3];
        for c in 0..3 {
            let t = (px[c] - self.domain_min[c]) / (self.domain_max[c] - self.domain_min[c]);
            let s = unit(t) * top;
            let i = (s.floor() as usize).min(n - 2);
            i0[c] = i;
            f[c] = s - i as f32;
        }
        // nested lerps keep constant lattices exact
        let e = |dr, dg, db| self.entry(i0[0] + dr, i0[1] + dg, i0[2] + db);
        let lerp = |a: [f32; 3], b: [f32; 3], t: f32| [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t);
        let c00 = lerp(e(0, 0, 0), e(1, 0, 0), f[0]);
        let c10 = lerp(e(0, 1, 0), e(1, 1, 0), f[0]);
        let c01 = lerp(e(0, 0, 1), e(1, 0, 1), f[0]);
        let c11 = lerp(e(0, 1, 1), e(1, 1, 1), f[0]);
        let out = lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]);
        out.map(unit)
    }
}

pub fn apply_lut3d(image: &Image, lut: &Lut3D) -> Image {
    map_colors(image, |px| lut.apply_pixel(px))
}

fn parse_floats<const N: usize>(tokens: &[&str], line: usize) -> Result<[f32; N], CubeError> {
    if tokens.len() != N {
        return Err(CubeError::BadArity { line, found: tokens.len() });
    }
    let mut out = [0f32; N];
    for (o, t) in out.iter_mut().zip(tokens) {
        *o = t
            .parse::<f32>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CubeError::BadToken { line, token: t.to_string() })?;
    }
    Ok(out)
}

/// Parse cube text. Table values outside `[0, 1]` are clamped.
pub fn parse_cube(text: &str) -> Result<Lut3D, CubeError> {
    let mut level: Option<usize> = None;
    let mut title = None;
    let mut dmin = [0f32; 3];
    let mut dmax = [1f32; 3];
    let mut domain_line = 0;
    let mut entries: Vec<[f32; 3]> = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        last_line = line;
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let head = tokens[0];
        let starts_alpha = head.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if starts_alpha && head.parse::<f32>().is_err() {
            match head {
                "TITLE" => {
                    let rest = trimmed["TITLE".len()..].trim();
                    title = Some(rest.trim_matches('"').to_string());
                }
                "LUT_3D_SIZE" => {
                    let [n] = parse_floats::<1>(&tokens[1..], line).map_err(|e| match e {
                        CubeError::BadArity { .. } => CubeError::MissingSize { line },
                        other => other,
                    })?;
                    let size = n as i64;
                    if n.fract() != 0.0 || !(2..=256).contains(&size) {
                        return Err(CubeError::SizeOutOfRange { line, size });
                    }
                    level = Some(size as usize);
                }
                "DOMAIN_MIN" => {
                    dmin = parse_floats::<3>(&tokens[1..], line)?;
                    domain_line = line;
                }
                "DOMAIN_MAX" => {
                    dmax = parse_floats::<3>(&tokens[1..], line)?;
                    domain_line = line;
                }
                "LUT_3D_INPUT_RANGE" => {
                    let [lo, hi] = parse_floats::<2>(&tokens[1..], line)?;
                    dmin = [lo; 3];
                    dmax = [hi; 3];
                    domain_line = line;
                }
                _ => {
                    return Err(CubeError::Unsupported { line, keyword: head.to_string() });
                }
            }
            continue;
        }
        let Some(n) = level else {
            return Err(CubeError::MissingSize { line });
        };
        let v = parse_floats::<3>(&tokens, line)?;
        if entries.len() == n * n * n {
            return Err(CubeError::EntryCount {
                line,
                expected: n * n * n,
                actual: entries.len() + 1,
            });
        }
        entries.push(v.map(unit));
    }

    let Some(n) = level else {
        return Err(CubeError::MissingSize { line: last_line.max(1) });
    };
    if entries.len() != n * n * n {
        return Err(CubeError::EntryCount {
            line: last_line,
            expected: n * n * n,
            actual: entries.len(),
        });
    }
    if (0..3).any(|c| dmax[c] <= dmin[c]) {
        return Err(CubeError::BadDomain { line: domain_line });
    }
    Ok(Lut3D {
        level: n,
        entries,
        title,
        domain_min: dmin,
        domain_max: dmax,
    })
}

pub fn serialize_cube(lut: &Lut3D) -> String {
    let mut s = String::new();
    if let Some(t) = &lut.title {
        let _ = writeln!(s, "TITLE \"{t}\"");
    }
    if lut.domain_min != [0.0; 3] || lut.domain_max != [1.0; 3] {
        let [a, b, c] = lut.domain_min;
        let _ = writeln!(s, "DOMAIN_MIN {a} {b} {c}");
        let [a, b, c] = lut.domain_max;
        let _ = writeln!(s, "DOMAIN_MAX {a} {b} {c}");
    }
    let _ = writeln!(s, "LUT_3D_SIZE {}", lut.level);
    for [r, g, b] in &lut.entries {
        let _ = writeln!(s, "{r} {g} {b}");
    }
    s
}

const BUNDLED: [(&str, &str); 6] = [
    ("bleach_bypass", include_str!("../assets/luts/bleach_bypass.cube")),
    ("cool_matte", include_str!("../assets/luts/cool_matte.cube")),
    ("cross_process", include_str!("../assets/luts/cross_process.cube")),
    ("sepia", include_str!("../assets/luts/sepia.cube")),
    ("teal_orange", include_str!("../assets/luts/teal_orange.cube")),
    ("warm_fade", include_str!("../assets/luts/warm_fade.cube")),
];

/// The cube files shipped with the crate.
pub fn bundled_luts() -> Vec<Lut3D> {
    BUNDLED
        .iter()
        .map(|(name, text)| parse_cube(text).unwrap_or_else(|e| panic!("bundled lut {name}: {e}")))
        .collect()
}

/// One random color perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Filter(FilterParams),
    /// LUT index and blend strength toward the LUT output.
    Lut { index: usize, strength: f32 },
    FilterThenLut { filter: FilterParams, index: usize, strength: f32 },
}

/// Draws perturbations and builds training pairs.
#[derive(Debug, Clone)]
pub struct Augmenter {
    luts: Vec<Lut3D>,
}

impl Default for Augmenter {
    fn default() -> Self {
        Self::new(bundled_luts())
    }
}

impl Augmenter {
    pub fn new(luts: Vec<Lut3D>) -> Self {
        Self { luts }
    }

    pub fn luts(&self) -> &[Lut3D] {
        &self.luts
    }

    /// Half filters, a quarter LUTs, a quarter filter then LUT. Without LUTs
    /// every draw is a filter.
    pub fn draw(&self, rng: &mut impl Rng) -> Perturbation {
        let u: f32 = rng.gen();
        if self.luts.is_empty() || u < 0.5 {
            return Perturbation::Filter(FilterParams::sample(rng));
        }
        let index = rng.gen_range(0..self.luts.len());
        let strength = rng.gen_range(0.5..=1.0);
        if u < 0.75 {
            Perturbation::Lut { index, strength }
        } else {
            Perturbation::FilterThenLut { filter: FilterParams::sample(rng), index, strength }
        }
    }

    pub fn apply_pixel(&self, p: &Perturbation, px: [f32; 3]) -> [f32; 3] {
        let lut_blend = |x: [f32; 3], index: usize, strength: f32| {
            let y = self.luts[index].apply_pixel(x);
            [0, 1, 2].map(|c| unit(x[c] + strength * (y[c] - x[c])))
        };
        match p {
            Perturbation::Filter(f) => f.apply_pixel(px),
            Perturbation::Lut { index, strength } => lut_blend(px, *index, *strength),
            Perturbation::FilterThenLut { filter, index, strength } => {
                lut_blend(filter.apply_pixel(px), *index, *strength)
            }
        }
    }

    pub fn apply(&self, image: &Image, p: &Perturbation) -> Image {
        map_colors(image, |px| self.apply_pixel(p, px))
    }

    /// Two independent perturbations of `image`, deterministic in `seed`.
    pub fn make_pair(&self, image: &Image, seed: u64) -> (Image, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = self.draw(&mut rng);
        let b = self.draw(&mut rng);
        (self.apply(image, &a), self.apply(image, &b))
    }
}

pub fn make_pair(image: &Image, seed: u64) -> (Image, Image) {
    Augmenter::default().make_pair(image, seed)
}
