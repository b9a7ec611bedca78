//! Desk-scale domain-shift benchmarks and evaluation.
//!
//! Two procedural dataset families stand in for the usual image benchmarks:
//!
//! * two interleaved half-circles ("moons"), where rotating the whole plane
//!   plays the role of a domain shift;
//! * 16x16 procedural glyphs over 5 classes, with five corruption families
//!   at severities 1..5 mirroring the corruption-benchmark convention.
//!
//! Every generator is a pure function of its parameters and seed. Also here:
//! the dataset text format, argmax evaluation, and the plain ERM baseline
//! trained under the exact same seed/batch/optimizer protocol as the full
//! method so the two runs are comparable step by step.

use std::fmt;
use std::path::Path;

use crate::error::{Result, UdgError};
use crate::grad::{ops, Rng, Stream, Tape, TapeMode};
use crate::meta::{Optimizer, TrainConfig};
use crate::model::{Backbone, ModelState};

pub const GLYPH_SIDE: usize = 16;
pub const GLYPH_DIM: usize = GLYPH_SIDE * GLYPH_SIDE;
pub const GLYPH_CLASSES: usize = 5;

/// Corruption families. `Rotation` describes the moons shift; the other five
/// apply to glyph images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CorruptionFamily {
    Rotation,
    Translation,
    Noise,
    Blur,
    Contrast,
    Occlusion,
}

impl fmt::Display for CorruptionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionFamily::Rotation => "rotation",
            CorruptionFamily::Translation => "translation",
            CorruptionFamily::Noise => "noise",
            CorruptionFamily::Blur => "blur",
            CorruptionFamily::Contrast => "contrast",
            CorruptionFamily::Occlusion => "occlusion",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for CorruptionFamily {
    type Err = UdgError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rotation" => CorruptionFamily::Rotation,
            "translation" => CorruptionFamily::Translation,
            "noise" => CorruptionFamily::Noise,
            "blur" => CorruptionFamily::Blur,
            "contrast" => CorruptionFamily::Contrast,
            "occlusion" => CorruptionFamily::Occlusion,
            other => {
                return Err(UdgError::InvalidValue(format!(
                    "unknown corruption family `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSpec {
    pub family: CorruptionFamily,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(family: CorruptionFamily, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(UdgError::InvalidValue(format!(
                "severity must lie in 1..=5, got {severity}"
            )));
        }
        Ok(ShiftSpec { family, severity })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub domain_id: String,
    pub shift: Option<ShiftSpec>,
}

impl DomainDataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        d: usize,
        classes: usize,
        domain_id: impl Into<String>,
        shift: Option<ShiftSpec>,
    ) -> Result<Self> {
        let ds = DomainDataset {
            n: labels.len(),
            inputs,
            labels,
            d,
            classes,
            domain_id: domain_id.into(),
            shift,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(UdgError::InvalidValue("dataset is empty".into()));
        }
        if self.inputs.len() != self.n * self.d {
            return Err(UdgError::InvalidValue(format!(
                "dataset `{}`: {} inputs for n={} d={}",
                self.domain_id,
                self.inputs.len(),
                self.n,
                self.d
            )));
        }
        if self.classes < 2 {
            return Err(UdgError::InvalidValue(format!(
                "dataset `{}` needs at least 2 classes",
                self.domain_id
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(UdgError::InvalidValue(format!(
                "dataset `{}`: label {bad} outside 0..{}",
                self.domain_id, self.classes
            )));
        }
        if let Some(bad) = self.inputs.iter().find(|v| !v.is_finite()) {
            return Err(UdgError::InvalidValue(format!(
                "dataset `{}` contains non-finite input {bad}",
                self.domain_id
            )));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    /// Gather a batch as (inputs, one-hot labels).
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut y = vec![0.0; idx.len() * self.classes];
        for (pos, &i) in idx.iter().enumerate() {
            x.extend_from_slice(self.row(i));
            y[pos * self.classes + self.labels[i]] = 1.0;
        }
        (x, y)
    }

    /// Write in the plain text format: header `n d classes`, then one line
    /// per example holding d reals and the integer label.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("{} {} {}\n", self.n, self.d, self.classes));
        for i in 0..self.n {
            let mut line = String::new();
            for v in self.row(i) {
                line.push_str(&format!("{v} "));
            }
            line.push_str(&format!("{}\n", self.labels[i]));
            out.push_str(&line);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::parse(&text, &name)
    }

    pub fn parse(text: &str, domain_id: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| UdgError::DataFormat(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 {
            return Err(bad(1, format!("header must be `n d classes`, got `{header}`")));
        }
        let parse_usize = |s: &str, what: &str, line: usize| {
            s.parse::<usize>()
                .map_err(|_| bad(line, format!("{what} is not an integer: `{s}`")))
        };
        let n = parse_usize(head[0], "n", 1)?;
        let d = parse_usize(head[1], "d", 1)?;
        let classes = parse_usize(head[2], "classes", 1)?;
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln0, line) = lines
                .next()
                .ok_or_else(|| bad(n + 1, format!("expected {n} data rows")))?;
            let ln = ln0 + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != d + 1 {
                return Err(bad(ln, format!("expected {} fields, got {}", d + 1, fields.len())));
            }
            for f in &fields[..d] {
                inputs.push(
                    f.parse::<f64>()
                        .map_err(|_| bad(ln, format!("bad real `{f}`")))?,
                );
            }
            labels.push(parse_usize(fields[d], "label", ln)?);
        }
        DomainDataset::new(inputs, labels, d, classes, domain_id, None)
    }
}

/// Two interleaved half-circles, optionally rotated about the origin.
/// Class 0 sits on (cos t, sin t), class 1 on (1 - cos t, 1/2 - sin t),
/// t uniform over [0, pi]; Gaussian coordinate noise is added before the
/// rotation. Quarter-turn angles use exact +-1/0 factors so full turns are
/// bit-identical to no turn.
pub fn gen_two_moons(n: usize, rotation_deg: f64, noise_std: f64, seed: u64) -> Result<DomainDataset> {
    if n < 2 {
        return Err(UdgError::InvalidValue(format!(
            "two-moons needs n >= 2, got {n}"
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(UdgError::InvalidValue(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }
    let root = Rng::new(seed);
    let n0 = n.div_ceil(2);
    let deg = rotation_deg.rem_euclid(360.0);
    let (cos_t, sin_t) = match deg {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let r = deg.to_radians();
            (r.cos(), r.sin())
        }
    };
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = root.derive(Stream::Data, &[i as u64]);
        let t = r.uniform_in(0.0, std::f64::consts::PI);
        let cls = usize::from(i >= n0);
        let (mut x, mut y) = if cls == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        if noise_std > 0.0 {
            x += noise_std * r.normal();
            y += noise_std * r.normal();
        }
        let (rx, ry) = (x * cos_t - y * sin_t, x * sin_t + y * cos_t);
        inputs.push(rx);
        inputs.push(ry);
        labels.push(cls);
    }
    let shift = if deg == 0.0 {
        None
    } else {
        Some(ShiftSpec {
            family: CorruptionFamily::Rotation,
            severity: 1,
        })
    };
    DomainDataset::new(
        inputs,
        labels,
        2,
        2,
        format!("moons_rot{rotation_deg}"),
        shift,
    )
}

fn px(img: &[f64], x: i64, y: i64) -> f64 {
    if (0..GLYPH_SIDE as i64).contains(&x) && (0..GLYPH_SIDE as i64).contains(&y) {
        img[y as usize * GLYPH_SIDE + x as usize]
    } else {
        0.0
    }
}

fn render_glyph(class: usize, rng: &mut Rng) -> Vec<f64> {
    let side = GLYPH_SIDE as f64;
    let mut img = vec![0.0; GLYPH_DIM];
    let ink = rng.uniform_in(0.7, 1.0);
    let cx = side / 2.0 + rng.uniform_in(-1.5, 1.5);
    let cy = side / 2.0 + rng.uniform_in(-1.5, 1.5);
    match class {
        // vertical bar
        0 => {
            let x0 = 5 + rng.below(5);
            let w = 2 + rng.below(2);
            let y0 = 1 + rng.below(2);
            let y1 = GLYPH_SIDE - 1 - rng.below(2);
            for y in y0..y1 {
                for x in x0..(x0 + w).min(GLYPH_SIDE) {
                    img[y * GLYPH_SIDE + x] = ink;
                }
            }
        }
        // cross
        1 => {
            let t = 1 + rng.below(2);
            let (icx, icy) = (cx as usize, cy as usize);
            for y in 1..GLYPH_SIDE - 1 {
                for x in icx.saturating_sub(t)..(icx + t).min(GLYPH_SIDE) {
                    img[y * GLYPH_SIDE + x] = ink;
                }
            }
            for x in 1..GLYPH_SIDE - 1 {
                for y in icy.saturating_sub(t)..(icy + t).min(GLYPH_SIDE) {
                    img[y * GLYPH_SIDE + x] = ink;
                }
            }
        }
        // ring
        2 => {
            let radius = rng.uniform_in(3.5, 5.5);
            let thick = rng.uniform_in(1.0, 1.6);
            for y in 0..GLYPH_SIDE {
                for x in 0..GLYPH_SIDE {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let dist = (dx * dx + dy * dy).sqrt();
                    if (dist - radius).abs() < thick {
                        img[y * GLYPH_SIDE + x] = ink;
                    }
                }
            }
        }
        // filled triangle, apex up
        3 => {
            let half = rng.uniform_in(4.5, 6.5);
            let top = cy - half;
            let bottom = cy + half * 0.8;
            for y in 0..GLYPH_SIDE {
                let fy = y as f64 + 0.5;
                if fy < top || fy > bottom {
                    continue;
                }
                let frac = (fy - top) / (bottom - top);
                let hw = frac * half;
                for x in 0..GLYPH_SIDE {
                    let fx = x as f64 + 0.5;
                    if (fx - cx).abs() <= hw {
                        img[y * GLYPH_SIDE + x] = ink;
                    }
                }
            }
        }
        // checkerboard
        _ => {
            let cell = 3 + rng.below(2);
            let phase = rng.below(2);
            for y in 0..GLYPH_SIDE {
                for x in 0..GLYPH_SIDE {
                    if (x / cell + y / cell + phase) % 2 == 0 {
                        img[y * GLYPH_SIDE + x] = ink;
                    }
                }
            }
        }
    }
    img
}

/// Apply one corruption; magnitudes per family:
/// noise std 0.04*severity (values may leave [0,1]); box-blur radius
/// min(severity-1, 3); contrast scale 1 - 0.15*severity about 1/2;
/// occlusion square of side 2*severity zeroed in-bounds; translation by
/// `severity` pixels in one of 4 directions with zero fill.
pub fn corrupt_glyph(img: &[f64], shift: ShiftSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    let s = shift.severity as f64;
    let side = GLYPH_SIDE as i64;
    Ok(match shift.family {
        CorruptionFamily::Noise => img
            .iter()
            .map(|v| v + 0.04 * s * rng.normal())
            .collect(),
        CorruptionFamily::Blur => {
            let r = (shift.severity as i64 - 1).min(3);
            if r == 0 {
                return Ok(img.to_vec());
            }
            let mut out = vec![0.0; GLYPH_DIM];
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x + dx, y + dy);
                            if (0..side).contains(&xx) && (0..side).contains(&yy) {
                                acc += px(img, xx, yy);
                                cnt += 1.0;
                            }
                        }
                    }
                    out[(y * side + x) as usize] = acc / cnt;
                }
            }
            out
        }
        CorruptionFamily::Contrast => {
            let scale = 1.0 - 0.15 * s;
            img.iter().map(|v| 0.5 + (v - 0.5) * scale).collect()
        }
        CorruptionFamily::Occlusion => {
            let sq = 2 * shift.severity as usize;
            let x0 = rng.below(GLYPH_SIDE - sq + 1);
            let y0 = rng.below(GLYPH_SIDE - sq + 1);
            let mut out = img.to_vec();
            for y in y0..y0 + sq {
                for x in x0..x0 + sq {
                    out[y * GLYPH_SIDE + x] = 0.0;
                }
            }
            out
        }
        CorruptionFamily::Translation => {
            let sft = shift.severity as i64;
            let (dx, dy) = match rng.below(4) {
                0 => (sft, 0),
                1 => (-sft, 0),
                2 => (0, sft),
                _ => (0, -sft),
            };
            let mut out = vec![0.0; GLYPH_DIM];
            for y in 0..side {
                for x in 0..side {
                    out[(y * side + x) as usize] = px(img, x - dx, y - dy);
                }
            }
            out
        }
        CorruptionFamily::Rotation => {
            return Err(UdgError::InvalidValue(
                "rotation is a moons shift, not a glyph corruption".into(),
            ))
        }
    })
}

/// Procedural 16x16 glyphs over 5 classes (bar, cross, ring, triangle,
/// checker), with per-example shape jitter. Each example derives its own
/// RNG streams, so the clean image under a given (seed, index) is the same
/// whether or not a corruption is requested.
pub fn gen_glyphs(n: usize, shift: Option<ShiftSpec>, seed: u64) -> Result<DomainDataset> {
    if n < 1 {
        return Err(UdgError::InvalidValue("glyphs needs n >= 1".into()));
    }
    if let Some(sp) = shift {
        ShiftSpec::new(sp.family, sp.severity)?;
        if sp.family == CorruptionFamily::Rotation {
            return Err(UdgError::InvalidValue(
                "rotation is a moons shift, not a glyph corruption".into(),
            ));
        }
    }
    let root = Rng::new(seed);
    let mut inputs = Vec::with_capacity(n * GLYPH_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let cls = i % GLYPH_CLASSES;
        let mut shape_rng = root.derive(Stream::Data, &[i as u64, 0]);
        let img = render_glyph(cls, &mut shape_rng);
        let img = match shift {
            Some(sp) => {
                let mut corrupt_rng = root.derive(Stream::Data, &[i as u64, 1]);
                corrupt_glyph(&img, sp, &mut corrupt_rng)?
            }
            None => img,
        };
        inputs.extend_from_slice(&img);
        labels.push(cls);
    }
    let id = match shift {
        Some(sp) => format!("glyphs_{}{}", sp.family, sp.severity),
        None => "glyphs_clean".into(),
    };
    DomainDataset::new(inputs, labels, GLYPH_DIM, GLYPH_CLASSES, id, shift)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub domain_id: String,
    pub shift: Option<ShiftSpec>,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

/// Argmax-of-logits accuracy. Ties break toward the lowest class index.
pub fn evaluate(backbone: &Backbone, ds: &DomainDataset) -> Result<MetricsRecord> {
    ds.validate()?;
    if backbone.output_dim() != ds.classes {
        return Err(UdgError::InvalidValue(format!(
            "model predicts {} classes, dataset `{}` has {}",
            backbone.output_dim(),
            ds.domain_id,
            ds.classes
        )));
    }
    if backbone.input_dim() != ds.d {
        return Err(UdgError::InvalidValue(format!(
            "model expects {} inputs, dataset `{}` has {}",
            backbone.input_dim(),
            ds.domain_id,
            ds.d
        )));
    }
    let fwd = backbone.forward_raw(&ds.inputs, ds.n, None)?;
    let c = ds.classes;
    let mut correct = 0usize;
    for i in 0..ds.n {
        let row = &fwd.logits[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(MetricsRecord {
        domain_id: ds.domain_id.clone(),
        shift: ds.shift,
        accuracy: correct as f64 / ds.n as f64,
        correct,
        n: ds.n,
    })
}

/// Plain cross-entropy baseline under the identical protocol as the full
/// trainer: same parameter initialization draw, same per-iteration batch
/// stream, same optimizer and learning rate. Returns the trained model and
/// the per-iteration loss trajectory.
pub fn erm_train(config: &TrainConfig, source: &DomainDataset) -> Result<(ModelState, Vec<f64>)> {
    config.validate()?;
    source.validate()?;
    let root = Rng::new(config.seed);
    let mut model = ModelState::init(
        &config.backbone_dims(source.d, source.classes),
        &config.perturb_layers,
        config.aux_hidden,
        config.floor,
        &root,
    )?;
    let mut opt = Optimizer::new(config.optimizer, config.outer_lr);
    let mut losses = Vec::with_capacity(config.iterations as usize);
    for iter in 0..config.iterations {
        let mut brng = root.derive(Stream::Batch, &[iter]);
        let bs = config.batch_size.min(source.n);
        let idx: Vec<usize> = (0..bs).map(|_| brng.below(source.n)).collect();
        let (x, y) = source.gather(&idx);

        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = model.backbone.bind(&mut tape, true)?;
        let handles = bound.param_tensors();
        let xt = tape.constant(&[bs, source.d], x)?;
        let yt = tape.constant(&[bs, source.classes], y)?;
        let pass = bound.forward_with_features(&mut tape, &xt, &Default::default())?;
        let loss = ops::softmax_cross_entropy(&mut tape, &pass.z, &yt)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(UdgError::NonFinite {
                context: format!("erm loss at iteration {iter}"),
            });
        }
        losses.push(lv);
        let refs: Vec<&_> = handles.iter().collect();
        let grads = tape.backward(&loss, &refs, false)?;
        opt.step(model.backbone.params_mut(), &grads)?;
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_full_turn_is_bit_identical() {
        let a = gen_two_moons(64, 0.0, 0.1, 9).unwrap();
        let b = gen_two_moons(64, 360.0, 0.1, 9).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn moons_half_turn_negates_coordinates() {
        let a = gen_two_moons(50, 0.0, 0.05, 3).unwrap();
        let b = gen_two_moons(50, 180.0, 0.05, 3).unwrap();
        for (va, vb) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(*va, -*vb);
        }
    }

    #[test]
    fn noiseless_moons_lie_on_the_half_circles() {
        let ds = gen_two_moons(80, 0.0, 0.0, 1).unwrap();
        for i in 0..ds.n {
            let (x, y) = (ds.inputs[i * 2], ds.inputs[i * 2 + 1]);
            let r = if ds.labels[i] == 0 {
                (x * x + y * y).sqrt()
            } else {
                let (dx, dy) = (x - 1.0, y - 0.5);
                (dx * dx + dy * dy).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-9, "radius {r}");
        }
    }

    #[test]
    fn moons_balance_splits_ceil_floor() {
        let ds = gen_two_moons(7, 0.0, 0.1, 2).unwrap();
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 4);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 3);
    }

    #[test]
    fn clean_glyphs_stay_in_unit_range() {
        let ds = gen_glyphs(50, None, 4).unwrap();
        assert_eq!(ds.d, 256);
        assert_eq!(ds.classes, 5);
        assert!(ds.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn glyph_classes_cycle() {
        let ds = gen_glyphs(10, None, 4).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn noise_scales_roughly_linearly_with_severity() {
        let n = 1000;
        let clean = gen_glyphs(n, None, 77).unwrap();
        let spread = |sev: u8| {
            let spec = ShiftSpec::new(CorruptionFamily::Noise, sev).unwrap();
            let noisy = gen_glyphs(n, Some(spec), 77).unwrap();
            let diffs: Vec<f64> = noisy
                .inputs
                .iter()
                .zip(&clean.inputs)
                .map(|(a, b)| a - b)
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            (diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / diffs.len() as f64)
                .sqrt()
        };
        let ratio = spread(5) / spread(1);
        assert!((4.0..=6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn occlusion_zeroes_exactly_the_square() {
        for sev in 1..=5u8 {
            let spec = ShiftSpec::new(CorruptionFamily::Occlusion, sev).unwrap();
            let clean = gen_glyphs(8, None, 5).unwrap();
            let occ = gen_glyphs(8, Some(spec), 5).unwrap();
            let side = 2 * sev as usize;
            for i in 0..8 {
                let a = &clean.inputs[i * 256..(i + 1) * 256];
                let b = &occ.inputs[i * 256..(i + 1) * 256];
                // changed pixels must form a subset of one zeroed square
                let changed: Vec<usize> =
                    (0..256).filter(|&p| a[p] != b[p]).collect();
                for &p in &changed {
                    assert_eq!(b[p], 0.0);
                }
                let (mut xs, mut ys): (Vec<usize>, Vec<usize>) = (vec![], vec![]);
                for &p in &changed {
                    xs.push(p % 16);
                    ys.push(p / 16);
                }
                if let (Some(&x0), Some(&y0)) = (xs.iter().min(), ys.iter().min()) {
                    let (x1, y1) = (*xs.iter().max().unwrap(), *ys.iter().max().unwrap());
                    assert!(x1 - x0 < side && y1 - y0 < side, "square side exceeded");
                    // some side x side window must cover every change and be
                    // entirely zero (edges of the square can coincide with
                    // background that was already zero, so the corner is not
                    // recoverable from the changed pixels alone)
                    let fits = |w: usize| w.saturating_sub(side - 1)..=w.min(16 - side);
                    let mut found = false;
                    for wy in fits(y0) {
                        for wx in fits(x0) {
                            if x1 < wx + side
                                && y1 < wy + side
                                && (wy..wy + side).all(|y| {
                                    (wx..wx + side).all(|x| b[y * 16 + x] == 0.0)
                                })
                            {
                                found = true;
                            }
                        }
                    }
                    assert!(found, "no fully zeroed window covers the changes");
                }
            }
        }
    }

    #[test]
    fn blur_severity_one_is_identity_and_grows_after() {
        let clean = gen_glyphs(64, None, 11).unwrap();
        let blur = |sev: u8| {
            let spec = ShiftSpec::new(CorruptionFamily::Blur, sev).unwrap();
            gen_glyphs(64, Some(spec), 11).unwrap()
        };
        assert_eq!(blur(1).inputs, clean.inputs);
        let dist = |ds: &DomainDataset| -> f64 {
            ds.inputs
                .iter()
                .zip(&clean.inputs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let d2 = dist(&blur(2));
        let d4 = dist(&blur(4));
        assert!(d2 > 0.0 && d4 > d2, "{d2} vs {d4}");
    }

    #[test]
    fn contrast_pulls_toward_the_midpoint() {
        let clean = gen_glyphs(32, None, 6).unwrap();
        let spec = ShiftSpec::new(CorruptionFamily::Contrast, 3).unwrap();
        let low = gen_glyphs(32, Some(spec), 6).unwrap();
        for (a, b) in clean.inputs.iter().zip(&low.inputs) {
            assert!((b - 0.5).abs() <= (a - 0.5).abs() + 1e-12);
            assert!((b - (0.5 + (a - 0.5) * 0.55)).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_moves_mass_and_zero_fills() {
        let clean = gen_glyphs(40, None, 8).unwrap();
        let spec = ShiftSpec::new(CorruptionFamily::Translation, 3).unwrap();
        let moved = gen_glyphs(40, Some(spec), 8).unwrap();
        let mass = |v: &[f64]| v.iter().sum::<f64>();
        // some mass falls off the edge for at least one image, never grows
        let mut strictly_less = false;
        for i in 0..40 {
            let a = mass(&clean.inputs[i * 256..(i + 1) * 256]);
            let b = mass(&moved.inputs[i * 256..(i + 1) * 256]);
            assert!(b <= a + 1e-9);
            if b < a - 1e-9 {
                strictly_less = true;
            }
        }
        assert!(strictly_less);
    }

    #[test]
    fn generators_are_pure_functions_of_seed() {
        let a = gen_glyphs(30, Some(ShiftSpec::new(CorruptionFamily::Noise, 2).unwrap()), 42).unwrap();
        let b = gen_glyphs(30, Some(ShiftSpec::new(CorruptionFamily::Noise, 2).unwrap()), 42).unwrap();
        assert_eq!(a, b);
        let m1 = gen_two_moons(25, 30.0, 0.1, 5).unwrap();
        let m2 = gen_two_moons(25, 30.0, 0.1, 5).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn dataset_file_roundtrip_preserves_values() {
        let ds = gen_two_moons(20, 45.0, 0.1, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.txt");
        ds.save(&path).unwrap();
        let back = DomainDataset::load(&path).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.n, 20);
        assert_eq!(back.d, 2);
        assert_eq!(back.classes, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("20 2 2\n"));
    }

    #[test]
    fn dataset_parse_errors_carry_line_numbers() {
        let err = DomainDataset::parse("3 2 2\n0.0 1.0 0\nbroken row\n", "x").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        let err = DomainDataset::parse("2 2\n", "x").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(DomainDataset::new(vec![0.0, 0.0], vec![5], 2, 2, "x", None).is_err());
        assert!(DomainDataset::new(vec![f64::NAN, 0.0], vec![0], 2, 2, "x", None).is_err());
    }

    #[test]
    fn constant_model_breaks_ties_toward_class_zero() {
        let mut rng = Rng::new(0);
        let mut backbone = Backbone::new(&[2, 4, 2], &[0], &mut rng).unwrap();
        for p in backbone.params_mut() {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
        let ds = gen_two_moons(10, 0.0, 0.1, 1).unwrap();
        let rec = evaluate(&backbone, &ds).unwrap();
        // 10 points: 5 of class 0, all predicted 0
        assert_eq!(rec.correct, 5);
        assert_eq!(rec.accuracy, 0.5);
    }

    #[test]
    fn evaluation_is_permutation_invariant() {
        let mut rng = Rng::new(3);
        let backbone = Backbone::new(&[2, 8, 2], &[0], &mut rng).unwrap();
        let ds = gen_two_moons(40, 0.0, 0.1, 2).unwrap();
        let rec = evaluate(&backbone, &ds).unwrap();
        // reverse the example order
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in (0..ds.n).rev() {
            inputs.extend_from_slice(ds.row(i));
            labels.push(ds.labels[i]);
        }
        let rev = DomainDataset::new(inputs, labels, 2, 2, "rev", None).unwrap();
        let rec2 = evaluate(&backbone, &rev).unwrap();
        assert_eq!(rec.correct, rec2.correct);
    }

    #[test]
    fn evaluation_rejects_class_mismatch() {
        let mut rng = Rng::new(3);
        let backbone = Backbone::new(&[2, 8, 3], &[0], &mut rng).unwrap();
        let ds = gen_two_moons(10, 0.0, 0.1, 2).unwrap();
        assert!(evaluate(&backbone, &ds).is_err());
    }

    #[test]
    fn erm_fits_two_moons() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 600;
        cfg.hidden = vec![16, 16];
        cfg.outer_lr = 0.25;
        let source = gen_two_moons(200, 0.0, 0.1, 0).unwrap();
        let (model, losses) = erm_train(&cfg, &source).unwrap();
        assert_eq!(losses.len(), 600);
        assert!(losses[599] < losses[0]);
        let rec = evaluate(&model.backbone, &source).unwrap();
        assert!(rec.accuracy >= 0.95, "accuracy {}", rec.accuracy);
    }

    #[test]
    fn erm_is_deterministic() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 40;
        cfg.hidden = vec![8];
        let source = gen_two_moons(60, 0.0, 0.1, 0).unwrap();
        let (m1, l1) = erm_train(&cfg, &source).unwrap();
        let (m2, l2) = erm_train(&cfg, &source).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in m1.backbone.params().iter().zip(m2.backbone.params().iter()) {
            assert_eq!(a.data, b.data);
        }
    }
}
