//! Procedural compositional images.
//!
//! Every object owns a spatial template and every state owns a contrast
//! factor plus an additive colour/texture pattern. The additive part is
//! scaled per (state, object) by `1 + object_conditioning · u`, so a state
//! looks different depending on the object it modifies.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::space::{CompositionSpace, Split};

pub const IMAGE_MAGIC: &[u8; 7] = b"PLOIMG1";
const CHANNELS: usize = 3;
const MAX_SPLIT_ATTEMPTS: usize = 1000;

const STATE_NAMES: [&str; 16] = [
    "old", "new", "wet", "dry", "broken", "painted", "rusty", "shiny", "burnt", "frozen", "cracked", "smooth",
    "wrinkled", "folded", "sliced", "ripe",
];
const OBJECT_NAMES: [&str; 16] = [
    "car", "shoe", "box", "apple", "chair", "bottle", "rope", "table", "bag", "coin", "cake", "leaf", "door",
    "bowl", "fence", "hat",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_states: usize,
    pub num_objects: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_val_unseen: usize,
    pub num_test_unseen: usize,
    /// Training samples per seen pair.
    pub train_per_pair: usize,
    /// Validation and test samples per candidate pair.
    pub eval_per_pair: usize,
    pub state_strength: f64,
    pub object_conditioning: f64,
    /// How far object templates deviate from mid-grey.
    pub object_contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_states: 8,
            num_objects: 10,
            image_size: 32,
            patch_size: 8,
            num_val_unseen: 16,
            num_test_unseen: 16,
            train_per_pair: 10,
            eval_per_pair: 4,
            state_strength: 0.35,
            object_conditioning: 0.8,
            object_contrast: 0.8,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_states", self.num_states),
            ("num_objects", self.num_objects),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("train_per_pair", self.train_per_pair),
            ("eval_per_pair", self.eval_per_pair),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        for (k, v) in [
            ("noise", self.noise),
            ("state_strength", self.state_strength),
            ("object_conditioning", self.object_conditioning),
            ("object_contrast", self.object_contrast),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be a non-negative number, got {v}")));
            }
        }
        let pairs = self.num_states * self.num_objects;
        if self.num_val_unseen + self.num_test_unseen >= pairs {
            return Err(Error::Config(format!(
                "cannot reserve {} unseen pairs out of {pairs}",
                self.num_val_unseen + self.num_test_unseen
            )));
        }
        Ok(())
    }

    pub fn state_names(&self) -> Vec<String> {
        names(&STATE_NAMES, "state", self.num_states)
    }

    pub fn object_names(&self) -> Vec<String> {
        names(&OBJECT_NAMES, "object", self.num_objects)
    }
}

fn names(pool: &[&str], prefix: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match pool.get(i) {
            Some(w) => w.to_string(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Sum of random plane waves mapped into `[0, 1]`.
fn wave_pattern<R: Rng>(size: usize, waves: usize, rng: &mut R) -> Vec<f64> {
    let params: Vec<(f64, f64, f64)> = (0..waves)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / size as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (theta, freq, phase)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let s: f64 = params
                .iter()
                .map(|&(t, f, p)| (f * (x as f64 * t.cos() + y as f64 * t.sin()) + p).sin())
                .sum();
            out.push(0.5 + 0.5 * s / waves as f64);
        }
    }
    out
}

/// The generative parameters of a dataset, fixed by the config seed.
#[derive(Clone, Debug)]
pub struct Renderer {
    size: usize,
    /// Per object, `H·W·C` template in `[0, 1]`.
    bases: Vec<Vec<f64>>,
    /// Per state contrast factor.
    alphas: Vec<f64>,
    /// Per state, `H·W·C` additive pattern in `[-1, 1]`.
    effects: Vec<Vec<f64>>,
    /// Per (state, object) draw `u ∈ [-1, 1]`, row-major by state.
    modulation: Vec<f64>,
    state_strength: f64,
    object_conditioning: f64,
    noise: f64,
    seed: u64,
}

impl Renderer {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.image_size;
        let bases = (0..cfg.num_objects)
            .map(|o| {
                let mut rng = rng_for(&[cfg.seed, 1, o as u64]);
                let mut t = Vec::with_capacity(size * size * CHANNELS);
                let chans: Vec<Vec<f64>> = (0..CHANNELS).map(|_| wave_pattern(size, 3, &mut rng)).collect();
                for i in 0..size * size {
                    for ch in &chans {
                        t.push(0.5 + cfg.object_contrast * (ch[i] - 0.5));
                    }
                }
                t
            })
            .collect();
        let mut alphas = Vec::with_capacity(cfg.num_states);
        let mut effects = Vec::with_capacity(cfg.num_states);
        for s in 0..cfg.num_states {
            let mut rng = rng_for(&[cfg.seed, 2, s as u64]);
            alphas.push(rng.gen_range(0.6..1.0));
            let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let tex = wave_pattern(size, 1, &mut rng);
            let mut e = Vec::with_capacity(size * size * CHANNELS);
            for &t in &tex {
                for &c in &tint {
                    e.push(c + (t - 0.5));
                }
            }
            effects.push(e);
        }
        let mut rng = rng_for(&[cfg.seed, 3]);
        let modulation = (0..cfg.num_states * cfg.num_objects)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Ok(Renderer {
            size,
            bases,
            alphas,
            effects,
            modulation,
            state_strength: cfg.state_strength,
            object_conditioning: cfg.object_conditioning,
            noise: cfg.noise,
            seed: cfg.seed,
        })
    }

    pub fn base(&self, object: usize) -> &[f64] {
        &self.bases[object]
    }

    pub fn alpha(&self, state: usize) -> f64 {
        self.alphas[state]
    }

    /// `1 + object_conditioning · u(s, o)`.
    pub fn modulation(&self, state: usize, object: usize) -> f64 {
        1.0 + self.object_conditioning * self.modulation[state * self.bases.len() + object]
    }

    /// Noise-free pixel values before clamping.
    pub fn raw(&self, state: usize, object: usize) -> Vec<f64> {
        let a = self.alphas[state];
        let k = self.modulation(state, object) * self.state_strength;
        self.bases[object]
            .iter()
            .zip(&self.effects[state])
            .map(|(&b, &e)| a * b + k * e)
            .collect()
    }

    /// Renders one sample; `index` picks the noise draw.
    pub fn render(&self, state: usize, object: usize, split: Split, index: usize) -> Image {
        let mut rng = rng_for(&[self.seed, 4, split as u64, state as u64, object as u64, index as u64]);
        let raw = self.raw(state, object);
        let pixels = if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("noise is finite and non-negative");
            raw.iter()
                .map(|&x| (x + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect()
        } else {
            raw.iter().map(|&x| x.clamp(0.0, 1.0) as f32).collect()
        };
        Image::new(self.size, self.size, CHANNELS, pixels).expect("renderer produces full images")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub state: usize,
    pub object: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: CompositionSpace,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn pair_of(&self, sample: &Sample) -> usize {
        self.space.index(sample.state, sample.object)
    }
}

/// Reserves unseen pairs so that every primitive still occurs among the seen
/// pairs, retrying a bounded number of times.
pub fn make_space(cfg: &SynthConfig) -> Result<CompositionSpace> {
    cfg.validate()?;
    let (ns, no) = (cfg.num_states, cfg.num_objects);
    let mut rng = rng_for(&[cfg.seed, 0]);
    let reserve = cfg.num_val_unseen + cfg.num_test_unseen;
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let mut pairs: Vec<usize> = (0..ns * no).collect();
        pairs.shuffle(&mut rng);
        let seen = &pairs[reserve..];
        let mut s_cov = vec![false; ns];
        let mut o_cov = vec![false; no];
        for &p in seen {
            s_cov[p / no] = true;
            o_cov[p % no] = true;
        }
        if s_cov.iter().all(|&c| c) && o_cov.iter().all(|&c| c) {
            return CompositionSpace::new(
                cfg.state_names(),
                cfg.object_names(),
                seen.to_vec(),
                pairs[..cfg.num_val_unseen].to_vec(),
                pairs[cfg.num_val_unseen..reserve].to_vec(),
            );
        }
    }
    Err(Error::Config(format!(
        "no split of {ns}x{no} pairs with {reserve} unseen keeps every primitive seen after {MAX_SPLIT_ATTEMPTS} attempts"
    )))
}

pub fn make_splits(cfg: &SynthConfig) -> Result<Dataset> {
    let space = make_space(cfg)?;
    let renderer = Renderer::new(cfg)?;
    let mut samples = Vec::new();
    let plan = [
        (Split::Train, space.seen().to_vec(), cfg.train_per_pair),
        (Split::Val, space.closed_world_columns(Split::Val), cfg.eval_per_pair),
        (Split::Test, space.closed_world_columns(Split::Test), cfg.eval_per_pair),
    ];
    for (split, pairs, per_pair) in plan {
        for p in pairs {
            let (s, o) = space.pair(p);
            for i in 0..per_pair {
                samples.push(Sample {
                    image: renderer.render(s, o, split, i),
                    state: s,
                    object: o,
                    split,
                });
            }
        }
    }
    Ok(Dataset { space, samples })
}

fn pair_lines(space: &CompositionSpace, pairs: &[usize]) -> String {
    pairs.iter().map(|&p| format!("{}\n", space.pair_name(p))).collect()
}

/// Writes `pairs.txt`, `{train,val,test}_pairs.txt`, `images.bin` and
/// `images.txt` (one `split state object` line per blob entry).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let sp = &ds.space;
    for name in sp.states.iter().chain(&sp.objects) {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("primitive name '{name}' must be a single word")));
        }
    }
    fs::create_dir_all(dir)?;
    let all: Vec<usize> = (0..sp.num_pairs()).collect();
    fs::write(dir.join("pairs.txt"), pair_lines(sp, &all))?;
    fs::write(dir.join("train_pairs.txt"), pair_lines(sp, sp.seen()))?;
    fs::write(dir.join("val_pairs.txt"), pair_lines(sp, &sp.closed_world_columns(Split::Val)))?;
    fs::write(dir.join("test_pairs.txt"), pair_lines(sp, &sp.closed_world_columns(Split::Test)))?;

    let mut blob = BufWriter::new(File::create(dir.join("images.bin"))?);
    blob.write_all(IMAGE_MAGIC)?;
    blob.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    let mut index = String::new();
    for s in &ds.samples {
        let im = &s.image;
        for d in [im.height, im.width, im.channels] {
            blob.write_all(&(d as u32).to_le_bytes())?;
        }
        for &p in &im.pixels {
            blob.write_all(&p.to_le_bytes())?;
        }
        index.push_str(&format!(
            "{} {} {}\n",
            s.split.name(),
            sp.states[s.state],
            sp.objects[s.object]
        ));
    }
    blob.flush()?;
    fs::write(dir.join("images.txt"), index)?;
    Ok(())
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Missing {
            what: "dataset file",
            path,
        });
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_pair_line(file: &str, line_no: usize, line: &str) -> Result<(String, String)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        [s, o] => Ok((s.to_string(), o.to_string())),
        _ => Err(Error::parse(file, line_no, format!("expected 'state object', got '{line}'"))),
    }
}

fn read_pair_list(dir: &Path, name: &str, space: &CompositionSpace) -> Result<Vec<usize>> {
    let text = read_text(dir, name)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (s, o) = parse_pair_line(name, i + 1, line)?;
        let p = space
            .find_pair(&s, &o)
            .ok_or_else(|| Error::parse(name, i + 1, format!("unknown composition '{s} {o}'")))?;
        out.push(p);
    }
    Ok(out)
}

/// Reads only the split files.
pub fn read_space(dir: &Path) -> Result<CompositionSpace> {
    let text = read_text(dir, "pairs.txt")?;
    let mut states: Vec<String> = Vec::new();
    let mut objects: Vec<String> = Vec::new();
    let mut order = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (s, o) = parse_pair_line("pairs.txt", i + 1, line)?;
        if !states.contains(&s) {
            states.push(s.clone());
        }
        if !objects.contains(&o) {
            objects.push(o.clone());
        }
        order.push((i + 1, s, o));
    }
    if order.len() != states.len() * objects.len() {
        return Err(Error::parse(
            "pairs.txt",
            order.len(),
            format!(
                "expected the full product of {} states and {} objects, found {} lines",
                states.len(),
                objects.len(),
                order.len()
            ),
        ));
    }
    for (k, (line, s, o)) in order.iter().enumerate() {
        let want = format!("{} {}", states[k / objects.len()], objects[k % objects.len()]);
        if format!("{s} {o}") != want {
            return Err(Error::parse("pairs.txt", *line, format!("expected '{want}' in index order")));
        }
    }
    let probe = CompositionSpace::new(states.clone(), objects.clone(), vec![], vec![], vec![])?;
    let seen = read_pair_list(dir, "train_pairs.txt", &probe)?;
    let seen_set: std::collections::HashSet<usize> = seen.iter().copied().collect();
    let unseen = |name| -> Result<Vec<usize>> {
        Ok(read_pair_list(dir, name, &probe)?
            .into_iter()
            .filter(|p| !seen_set.contains(p))
            .collect())
    };
    let val = unseen("val_pairs.txt")?;
    let test = unseen("test_pairs.txt")?;
    CompositionSpace::new(states, objects, seen, val, test)
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Validation("images.bin is truncated".into()))?;
    let out = &buf[*pos..end];
    *pos = end;
    Ok(out)
}

fn take_u32(buf: &[u8], pos: &mut usize) -> Result<usize> {
    let b = take(buf, pos, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
}

pub fn read_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let mut pos = 0;
    if take(bytes, &mut pos, IMAGE_MAGIC.len())? != IMAGE_MAGIC {
        return Err(Error::Validation("images.bin has a bad magic header".into()));
    }
    let count = take_u32(bytes, &mut pos)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (h, w, c) = (take_u32(bytes, &mut pos)?, take_u32(bytes, &mut pos)?, take_u32(bytes, &mut pos)?);
        let raw = take(bytes, &mut pos, h * w * c * 4)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        out.push(Image::new(h, w, c, pixels)?);
    }
    if pos != bytes.len() {
        return Err(Error::Validation(format!(
            "images.bin has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let space = read_space(dir)?;
    let path = dir.join("images.bin");
    if !path.exists() {
        return Err(Error::Missing {
            what: "image blob",
            path,
        });
    }
    let mut bytes = Vec::new();
    File::open(&path)?.read_to_end(&mut bytes)?;
    let images = read_images(&bytes)?;
    let index = read_text(dir, "images.txt")?;
    let lines: Vec<(usize, &str)> = index
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if lines.len() != images.len() {
        return Err(Error::Validation(format!(
            "images.txt lists {} entries but images.bin holds {}",
            lines.len(),
            images.len()
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for ((line_no, line), image) in lines.into_iter().zip(images) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [split, s, o] = parts.as_slice() else {
            return Err(Error::parse("images.txt", line_no, "expected 'split state object'"));
        };
        let split = Split::parse(split)
            .ok_or_else(|| Error::parse("images.txt", line_no, format!("unknown split '{split}'")))?;
        let p = space
            .find_pair(s, o)
            .ok_or_else(|| Error::parse("images.txt", line_no, format!("unknown composition '{s} {o}'")))?;
        let (state, object) = space.pair(p);
        samples.push(Sample {
            image,
            state,
            object,
            split,
        });
    }
    Ok(Dataset { space, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_states: 3,
            num_objects: 4,
            num_val_unseen: 2,
            num_test_unseen: 2,
            train_per_pair: 2,
            eval_per_pair: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let cfg = small();
        let r = Renderer::new(&cfg).unwrap();
        let a = r.render(1, 2, Split::Train, 0);
        let b = Renderer::new(&cfg).unwrap().render(1, 2, Split::Train, 0);
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_ne!(a, r.render(1, 2, Split::Train, 1));
    }

    #[test]
    fn two_by_two_with_one_unseen() {
        let cfg = SynthConfig {
            num_states: 2,
            num_objects: 2,
            num_val_unseen: 0,
            num_test_unseen: 1,
            ..SynthConfig::default()
        };
        let sp = make_space(&cfg).unwrap();
        assert_eq!(sp.seen().len(), 3);
        assert_eq!(sp.unseen(Split::Test).len(), 1);
    }

    #[test]
    fn infeasible_reservation_is_config_error() {
        let cfg = SynthConfig {
            num_states: 2,
            num_objects: 2,
            num_val_unseen: 1,
            num_test_unseen: 2,
            ..SynthConfig::default()
        };
        // One seen pair can never cover both states.
        assert!(matches!(make_space(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn blob_rejects_bad_magic_and_truncation() {
        assert!(read_images(b"PLOIMG2\0\0\0\0").is_err());
        let mut ok = IMAGE_MAGIC.to_vec();
        ok.extend_from_slice(&1u32.to_le_bytes());
        ok.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert!(read_images(&ok).is_err());
        ok.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(read_images(&ok).unwrap()[0].pixels, vec![0.5]);
    }
}
