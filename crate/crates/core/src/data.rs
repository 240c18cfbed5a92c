//! Synthetic referring-segmentation data.
//!
//! Every scene drops two or three shapes into distinct quadrants of a
//! square canvas, each with its own gray level, then asks for exactly one
//! of them by shape word and quadrant ("segment the disc in the upper
//! left"). The caption pins down one shape unambiguously by construction,
//! so a model that reads the text can hit the mask and one that ignores
//! it cannot.

use crate::error::{Error, Result};
use crate::pgm;
use crate::rng;
use crate::tensor::Tensor;
use crate::tensor_io;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Word list; id 0 is padding and never appears in a caption.
pub const WORDS: [&str; 10] =
    ["segment", "the", "in", "disc", "square", "triangle", "upper", "lower", "left", "right"];

pub fn vocab_len() -> usize {
    WORDS.len() + 1
}

pub fn word_id(word: &str) -> Option<usize> {
    WORDS.iter().position(|&w| w == word).map(|i| i + 1)
}

pub fn tokenize(caption: &str, n: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for word in caption.split_whitespace() {
        let id = word_id(word)
            .ok_or_else(|| Error::Data(format!("unknown word {word:?} in caption")))?;
        ids.push(id);
    }
    if ids.len() > n {
        return Err(Error::Data(format!(
            "caption has {} words, limit is {n}",
            ids.len()
        )));
    }
    ids.resize(n, 0);
    Ok(ids)
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        if id == 0 {
            continue;
        }
        let word = WORDS
            .get(id - 1)
            .ok_or_else(|| Error::Data(format!("token id {id} out of vocabulary")))?;
        words.push(*word);
    }
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Quadrants in caption order: (vertical word, horizontal word).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::UpperLeft, Quadrant::UpperRight, Quadrant::LowerLeft, Quadrant::LowerRight];

    pub fn words(self) -> (&'static str, &'static str) {
        match self {
            Quadrant::UpperLeft => ("upper", "left"),
            Quadrant::UpperRight => ("upper", "right"),
            Quadrant::LowerLeft => ("lower", "left"),
            Quadrant::LowerRight => ("lower", "right"),
        }
    }

    /// Top-left corner of this quadrant on an h x h canvas.
    fn origin(self, h: usize) -> (usize, usize) {
        let half = h / 2;
        match self {
            Quadrant::UpperLeft => (0, 0),
            Quadrant::UpperRight => (0, half),
            Quadrant::LowerLeft => (half, 0),
            Quadrant::LowerRight => (half, half),
        }
    }
}

/// One placed shape: kind, center (row, col), half-extent, gray level.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub kind: ShapeKind,
    pub quadrant: Quadrant,
    pub cy: usize,
    pub cx: usize,
    pub r: usize,
    pub gray: f64,
}

/// Rasterize one shape onto an h x h binary grid.
pub fn rasterize(p: &Placement, h: usize) -> Tensor {
    let mut data = vec![0.0; h * h];
    let (cy, cx, r) = (p.cy as f64, p.cx as f64, p.r as f64);
    for y in 0..h {
        for x in 0..h {
            let (fy, fx) = (y as f64, x as f64);
            let inside = match p.kind {
                ShapeKind::Disc => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
                ShapeKind::Square => (fy - cy).abs() <= r && (fx - cx).abs() <= r,
                // Apex up: full base width at the bottom edge.
                ShapeKind::Triangle => {
                    (cy - r..=cy + r).contains(&fy) && (fx - cx).abs() <= (fy - cy + r) / 2.0
                }
            };
            if inside {
                data[y * h + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, h], data).unwrap()
}

pub struct Sample {
    /// `[3, H, W]` in [0, 1]; three identical grayscale channels.
    pub image: Tensor,
    /// Word ids zero-padded to the tokenizer length.
    pub token_ids: Vec<usize>,
    /// One-hot `[2, H, W]`: channel 0 background, channel 1 target.
    pub mask: Tensor,
    pub caption: String,
}

/// The generator's own record of a scene, kept for oracle checks.
pub struct SceneSpec {
    pub placements: Vec<Placement>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub h: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub version: u32,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const NOISE_SIGMA: f64 = 0.05;
/// Token slots per caption; captions use at most 7.
pub const TOKEN_LEN: usize = 12;

fn split_sizes(count: usize) -> (usize, usize, usize) {
    let val = count / 6;
    let test = count / 6;
    (count - val - test, val, test)
}

pub fn synth_generate(seed: u64, count: usize, h: usize) -> Result<(Vec<Sample>, DatasetManifest)> {
    let (samples, _specs) = synth_generate_with_specs(seed, count, h)?;
    let (train, val, test) = split_sizes(count);
    Ok((samples, DatasetManifest {
        seed,
        count,
        h,
        train,
        val,
        test,
        version: MANIFEST_VERSION,
    }))
}

pub fn synth_generate_with_specs(
    seed: u64,
    count: usize,
    h: usize,
) -> Result<(Vec<Sample>, Vec<SceneSpec>)> {
    if h < 32 || !h.is_power_of_two() {
        return Err(Error::Config(format!(
            "canvas extent must be a power of two >= 32, got {h}"
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::derived(seed, i as u64);
        let (sample, spec) = generate_scene(&mut r, h, class_for(seed, i));
        samples.push(sample);
        specs.push(spec);
    }
    Ok((samples, specs))
}

/// Caption class for sample `i`: blocks of twelve samples cover all
/// (shape, quadrant) pairs in a per-block shuffled order. Plain uniform
/// draws routinely stray past 20% from uniform at corpus sizes around a
/// thousand, so balance is built in rather than hoped for; each sample
/// still depends only on (seed, index).
fn class_for(seed: u64, i: usize) -> (ShapeKind, Quadrant) {
    let mut r = rng::derived(seed, 0xb10c_0000 ^ (i / 12) as u64);
    let mut order: [usize; 12] = std::array::from_fn(|c| c);
    order.shuffle(&mut r);
    let c = order[i % 12];
    (ShapeKind::ALL[c / 4], Quadrant::ALL[c % 4])
}

fn generate_scene(
    r: &mut rand_chacha::ChaCha8Rng,
    h: usize,
    class: (ShapeKind, Quadrant),
) -> (Sample, SceneSpec) {
    loop {
        if let Some(out) = try_scene(r, h, class) {
            return out;
        }
    }
}

fn try_scene(
    r: &mut rand_chacha::ChaCha8Rng,
    h: usize,
    (target_kind, target_quadrant): (ShapeKind, Quadrant),
) -> Option<(Sample, SceneSpec)> {
    let n_shapes = r.gen_range(2..=3);

    let mut quadrants = vec![target_quadrant];
    let mut others: Vec<Quadrant> = Quadrant::ALL
        .into_iter()
        .filter(|q| *q != target_quadrant)
        .collect();
    others.shuffle(r);
    quadrants.extend(others.into_iter().take(n_shapes - 1));

    // Kinds are distinct within a scene and each kind keeps a fixed gray
    // level, so the shapes of a scene always have distinct grays and the
    // caption word pins down the target's appearance as well as its place.
    let mut kinds = vec![target_kind];
    let mut other_kinds: Vec<ShapeKind> = ShapeKind::ALL
        .into_iter()
        .filter(|k| *k != target_kind)
        .collect();
    other_kinds.shuffle(r);
    kinds.extend(other_kinds.into_iter().take(n_shapes - 1));

    let mut placements = Vec::with_capacity(n_shapes);
    for (&kind, &q) in kinds.iter().zip(quadrants.iter()) {
        let p = place_in_quadrant(r, h, kind, q, kind_gray(kind))?;
        placements.push(p);
    }

    let target = 0;
    let mask_fg = rasterize(&placements[target], h);

    // Compose grays, brightest shape last has no special meaning because
    // quadrants are disjoint.
    let mut gray_img = vec![0.08; h * h];
    for p in &placements {
        let m = rasterize(p, h);
        for (px, &inside) in gray_img.iter_mut().zip(m.data()) {
            if inside == 1.0 {
                *px = p.gray;
            }
        }
    }
    for px in gray_img.iter_mut() {
        let noise: f64 = r.sample(rand_distr::StandardNormal);
        *px = (*px + NOISE_SIGMA * noise).clamp(0.0, 1.0);
    }
    let mut img = Vec::with_capacity(3 * h * h);
    for _ in 0..3 {
        img.extend_from_slice(&gray_img);
    }

    let p = &placements[target];
    let (vert, horiz) = p.quadrant.words();
    let caption = format!("segment the {} in the {} {}", p.kind.word(), vert, horiz);
    let token_ids = tokenize(&caption, TOKEN_LEN).expect("generator captions are in-vocab");

    let mut mask = vec![0.0; 2 * h * h];
    for (i, &fg) in mask_fg.data().iter().enumerate() {
        mask[i] = 1.0 - fg;
        mask[h * h + i] = fg;
    }

    let sample = Sample {
        image: Tensor::new(vec![3, h, h], img).unwrap(),
        token_ids,
        mask: Tensor::new(vec![2, h, h], mask).unwrap(),
        caption,
    };
    Some((sample, SceneSpec { placements, target }))
}

fn place_in_quadrant(
    r: &mut rand_chacha::ChaCha8Rng,
    h: usize,
    kind: ShapeKind,
    quadrant: Quadrant,
    gray: f64,
) -> Option<Placement> {
    let half = h / 2;
    let (oy, ox) = quadrant.origin(h);
    // Largest radius that still fits strictly inside the quadrant is
    // half/2 - 2; keep shapes near that so targets cover a solid chunk
    // of their quadrant rather than a few dozen pixels.
    let r_hi = (half / 2).saturating_sub(2).max(1);
    let r_lo = (half / 3).max(1).min(r_hi);
    for _ in 0..100 {
        let radius = r.gen_range(r_lo..=r_hi);
        let lo = radius + 1;
        let hi = half - radius - 1;
        if lo >= hi {
            continue;
        }
        let cy = oy + r.gen_range(lo..=hi);
        let cx = ox + r.gen_range(lo..=hi);
        return Some(Placement { kind, quadrant, cy, cx, r: radius, gray });
    }
    None
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.manifest.train]
    }

    pub fn val(&self) -> &[Sample] {
        let start = self.manifest.train;
        &self.samples[start..start + self.manifest.val]
    }

    pub fn test(&self) -> &[Sample] {
        let start = self.manifest.train + self.manifest.val;
        &self.samples[start..start + self.manifest.test]
    }

    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(self.train()),
            "val" => Ok(self.val()),
            "test" => Ok(self.test()),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train, val, or test"
            ))),
        }
    }
}

/// Directory layout: `manifest.txt` (key = value), `images/NNNN.seut`,
/// `masks/NNNN.pgm`, `captions.txt` with one caption per line.
pub fn save_dataset(dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut m = String::new();
    let _ = writeln!(m, "version = {}", manifest.version);
    let _ = writeln!(m, "seed = {}", manifest.seed);
    let _ = writeln!(m, "count = {}", manifest.count);
    let _ = writeln!(m, "h = {}", manifest.h);
    let _ = writeln!(m, "train = {}", manifest.train);
    let _ = writeln!(m, "val = {}", manifest.val);
    let _ = writeln!(m, "test = {}", manifest.test);
    std::fs::write(dir.join("manifest.txt"), m)?;

    let mut captions = String::new();
    for (i, s) in samples.iter().enumerate() {
        let entries = vec![("image".to_string(), s.image.clone())];
        tensor_io::save(&dir.join("images").join(format!("{i:04}.seut")), &entries)?;
        let h = s.mask.shape()[1];
        let w = s.mask.shape()[2];
        let fg = Tensor::new(
            vec![h, w],
            s.mask.data()[h * w..].to_vec(),
        )?;
        pgm::write_pgm(&dir.join("masks").join(format!("{i:04}.pgm")), &fg)?;
        captions.push_str(&s.caption);
        captions.push('\n');
    }
    std::fs::write(dir.join("captions.txt"), captions)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut fields = std::collections::BTreeMap::new();
    for (ln, line) in manifest_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Data(format!("manifest line {}: expected key = value", ln + 1))
        })?;
        let v: u64 = v.trim().parse().map_err(|e| {
            Error::Data(format!("manifest line {}: bad number: {e}", ln + 1))
        })?;
        fields.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| -> Result<u64> {
        fields.get(k).copied().ok_or_else(|| Error::Data(format!("manifest missing {k:?}")))
    };
    let manifest = DatasetManifest {
        version: get("version")? as u32,
        seed: get("seed")?,
        count: get("count")? as usize,
        h: get("h")? as usize,
        train: get("train")? as usize,
        val: get("val")? as usize,
        test: get("test")? as usize,
    };
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "manifest version {} unsupported, expected {MANIFEST_VERSION}",
            manifest.version
        )));
    }
    if manifest.train + manifest.val + manifest.test != manifest.count {
        return Err(Error::Data(format!(
            "manifest splits {}+{}+{} do not sum to count {}",
            manifest.train, manifest.val, manifest.test, manifest.count
        )));
    }

    let caption_text = std::fs::read_to_string(dir.join("captions.txt"))?;
    let captions: Vec<&str> = caption_text.lines().collect();
    if captions.len() != manifest.count {
        return Err(Error::Data(format!(
            "captions.txt has {} lines, manifest promises {}",
            captions.len(),
            manifest.count
        )));
    }

    let mut samples = Vec::with_capacity(manifest.count);
    for (i, caption) in captions.iter().enumerate() {
        let entries = tensor_io::load(&dir.join("images").join(format!("{i:04}.seut")))?;
        let image = entries
            .into_iter()
            .find(|(n, _)| n == "image")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("sample {i}: no tensor named \"image\"")))?;
        if image.shape() != [3, manifest.h, manifest.h] {
            return Err(Error::Data(format!(
                "sample {i}: image shape {:?}, expected {:?}",
                image.shape(),
                [3, manifest.h, manifest.h]
            )));
        }
        let fg = pgm::read_pgm(&dir.join("masks").join(format!("{i:04}.pgm")))?;
        if fg.shape() != [manifest.h, manifest.h] {
            return Err(Error::Data(format!(
                "sample {i}: mask shape {:?}, expected {:?}",
                fg.shape(),
                [manifest.h, manifest.h]
            )));
        }
        let hh = manifest.h * manifest.h;
        let mut mask = vec![0.0; 2 * hh];
        for (j, &v) in fg.data().iter().enumerate() {
            mask[j] = 1.0 - v;
            mask[hh + j] = v;
        }
        samples.push(Sample {
            image,
            token_ids: tokenize(caption, TOKEN_LEN)?,
            mask: Tensor::new(vec![2, manifest.h, manifest.h], mask)?,
            caption: caption.to_string(),
        });
    }
    Ok(Dataset { samples, manifest })
}
