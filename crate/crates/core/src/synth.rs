//! Deterministic long-tailed synthetic age benchmark.
//!
//! Each image is a grey square whose background level rises linearly with
//! age, overlaid with `⌊age/10⌋ + 1` concentric bright rings. A per-image
//! brightness offset and Gaussian pixel noise are optional. Rings are centred
//! on the image, so a horizontal mirror is another valid image of the same age.
//!
//! On disk a dataset is a directory with
//!
//! ```text
//! images/<id>.pgm    8-bit binary PGM (P5), one per sample
//! labels.csv         id,filename,age
//! split.csv          id,split        (split is "train" or "test")
//! config.snapshot    key = value generator settings
//! ```
//!
//! Ids are `AAA_IIIII`: zero-padded age, then index within that age.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::config::{format_kv, parse_kv, parse_value};
use crate::error::{bail, Error, Result};
use crate::labels::MAX_AGE;
use crate::sampling::DatasetIndex;
use crate::seed;
use crate::tensor::{Real, Tensor3};

/// Brightness added on ring pixels.
pub const RING_AMPLITUDE: f64 = 48.0;
const RING_HALF_WIDTH: f64 = 0.6;
const RING_JITTER: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub max_age: usize,
    /// Side length of the square single-channel images.
    pub image_size: usize,
    pub head_center: usize,
    pub head_count: usize,
    pub tail_min: usize,
    /// Exponential decay length in years; `inf` gives a balanced set.
    pub decay: f64,
    /// Optional cap on the total sample count; `head_count` shrinks to fit.
    pub budget: Option<usize>,
    /// Standard deviation of additive pixel noise, in grey levels.
    pub noise: f64,
    /// Standard deviation of a per-image brightness offset, in grey levels.
    /// Unlike pixel noise it does not average out, so it blurs neighbouring ages.
    pub lum_jitter: f64,
    pub lum_low: f64,
    pub lum_high: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_age: MAX_AGE,
            image_size: 64,
            head_center: 35,
            head_count: 500,
            tail_min: 5,
            decay: 10.0,
            budget: None,
            noise: 8.0,
            lum_jitter: 4.0,
            lum_low: 48.0,
            lum_high: 176.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tail_min < 1 {
            bail!(Config, "data.tail_min must be at least 1");
        }
        if self.head_center > self.max_age {
            bail!(
                Config,
                "data.head_center {} exceeds max age {}",
                self.head_center,
                self.max_age
            );
        }
        if !(self.decay > 0.0) {
            bail!(Config, "data.decay must be positive");
        }
        if self.image_size < 8 {
            bail!(Config, "data.image_size must be at least 8");
        }
        for (v, key) in [(self.noise, "data.noise"), (self.lum_jitter, "data.lum_jitter")] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(Config, "{key} must be a finite non-negative number");
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            bail!(Config, "data.test_fraction must lie in [0, 1)");
        }
        if !(0.0 <= self.lum_low && self.lum_low < self.lum_high && self.lum_high + RING_AMPLITUDE <= 255.0) {
            bail!(
                Config,
                "need 0 <= data.lum_low < data.lum_high <= {}",
                255.0 - RING_AMPLITUDE
            );
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.max_age" => self.max_age = parse_value(key, v)?,
            "data.image_size" => self.image_size = parse_value(key, v)?,
            "data.head_center" => self.head_center = parse_value(key, v)?,
            "data.head_count" => self.head_count = parse_value(key, v)?,
            "data.tail_min" => self.tail_min = parse_value(key, v)?,
            "data.decay" => self.decay = parse_value(key, v)?,
            "data.budget" => {
                self.budget = match v {
                    "none" | "" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "data.noise" => self.noise = parse_value(key, v)?,
            "data.lum_jitter" => self.lum_jitter = parse_value(key, v)?,
            "data.lum_low" => self.lum_low = parse_value(key, v)?,
            "data.lum_high" => self.lum_high = parse_value(key, v)?,
            "data.test_fraction" => self.test_fraction = parse_value(key, v)?,
            other => bail!(Config, "unknown configuration key '{other}'"),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("data.max_age", self.max_age.to_string()),
            ("data.image_size", self.image_size.to_string()),
            ("data.head_center", self.head_center.to_string()),
            ("data.head_count", self.head_count.to_string()),
            ("data.tail_min", self.tail_min.to_string()),
            ("data.decay", self.decay.to_string()),
            ("data.budget", self.budget.map_or("none".into(), |b| b.to_string())),
            ("data.noise", self.noise.to_string()),
            ("data.lum_jitter", self.lum_jitter.to_string()),
            ("data.lum_low", self.lum_low.to_string()),
            ("data.lum_high", self.lum_high.to_string()),
            ("data.test_fraction", self.test_fraction.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn snapshot(&self) -> String {
        let mut e = vec![("seed".to_string(), self.seed.to_string())];
        e.extend(self.entries());
        format_kv(&e)
    }

    fn from_snapshot(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (k, v) in parse_kv(text)? {
            if k == "seed" {
                cfg.seed = parse_value(&k, &v)?;
            } else {
                cfg.set(&k, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn profile_counts(head_count: usize, cfg: &SynthConfig) -> Vec<usize> {
    (0..=cfg.max_age)
        .map(|k| {
            let d = (k as f64 - cfg.head_center as f64).abs();
            let n = (head_count as f64 * (-d / cfg.decay).exp()).round() as usize;
            n.max(cfg.tail_min)
        })
        .collect()
}

/// `N_k = max(tail_min, round(head_count · exp(−|k − center| / decay)))`,
/// with `head_count` reduced to the largest value that respects the budget.
pub fn longtail_counts(cfg: &SynthConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let Some(budget) = cfg.budget else {
        return Ok(profile_counts(cfg.head_count, cfg));
    };
    let total = |h| profile_counts(h, cfg).iter().sum::<usize>();
    if total(0) > budget {
        bail!(
            Config,
            "data.budget {budget} is below the tail floor of {} samples",
            total(0)
        );
    }
    let (mut lo, mut hi) = (0, cfg.head_count);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if total(mid) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(profile_counts(lo, cfg))
}

pub fn base_luminance(age: usize, cfg: &SynthConfig) -> f64 {
    cfg.lum_low + (cfg.lum_high - cfg.lum_low) * age as f64 / cfg.max_age as f64
}

fn check_age(age: usize, cfg: &SynthConfig) -> Result<()> {
    if age > cfg.max_age {
        bail!(InvalidInput, "age {age} outside [0, {}]", cfg.max_age);
    }
    Ok(())
}

fn ring_radii_from(age: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let rings = age / 10 + 1;
    let max_rings = cfg.max_age / 10 + 1;
    let s = cfg.image_size as f64;
    let start = 0.05 * s;
    let spacing = (0.45 * s - start) / max_rings as f64;
    (0..rings)
        .map(|i| start + spacing * i as f64 + spacing * rng.random_range(-RING_JITTER..=RING_JITTER))
        .collect()
}

pub fn ring_radii(age: usize, sample_seed: u64, cfg: &SynthConfig) -> Result<Vec<f64>> {
    check_age(age, cfg)?;
    Ok(ring_radii_from(age, cfg, &mut seed::rng(&[sample_seed])))
}

fn mask_from(radii: &[f64], size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut m = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            m.push(radii.iter().any(|r| (d - r).abs() <= RING_HALF_WIDTH));
        }
    }
    m
}

/// Pixels covered by the rings of this sample, row-major.
pub fn ring_mask(age: usize, sample_seed: u64, cfg: &SynthConfig) -> Result<Vec<bool>> {
    Ok(mask_from(&ring_radii(age, sample_seed, cfg)?, cfg.image_size))
}

/// Renders one `image_size²` 8-bit image, row-major.
pub fn render_age_image(age: usize, sample_seed: u64, cfg: &SynthConfig) -> Result<Vec<u8>> {
    check_age(age, cfg)?;
    let mut rng = seed::rng(&[sample_seed]);
    let mask = mask_from(&ring_radii_from(age, cfg, &mut rng), cfg.image_size);
    let mut base = base_luminance(age, cfg);
    if cfg.lum_jitter > 0.0 {
        let n: f64 = StandardNormal.sample(&mut rng);
        base += cfg.lum_jitter * n;
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    Ok(mask
        .iter()
        .map(|&ring| {
            let mut v = base + if ring { RING_AMPLITUDE } else { 0.0 };
            if cfg.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// `(v − 127.5) / 128`.
pub fn normalize_pixel(v: u8) -> f64 {
    (v as f64 - 127.5) / 128.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSample {
    pub id: String,
    pub age: usize,
    pub seed: u64,
}

pub fn sample_id(age: usize, index: usize) -> String {
    format!("{age:03}_{index:05}")
}

/// Every sample of the configured profile, ordered by age then index.
pub fn plan_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let counts = longtail_counts(cfg)?;
    Ok(counts
        .iter()
        .enumerate()
        .flat_map(|(age, &n)| {
            (0..n).map(move |i| SynthSample {
                id: sample_id(age, i),
                age,
                seed: seed::mix(&[cfg.seed, seed::TAG_RENDER, age as u64, i as u64]),
            })
        })
        .collect())
}

/// Marks each planned sample as test (`true`) or train, stratified by age.
/// Every age with at least one sample contributes at least one test sample.
pub fn stratified_split(cfg: &SynthConfig, counts: &[usize]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (age, &n) in counts.iter().enumerate() {
        if cfg.test_fraction == 0.0 || n == 0 {
            out.extend(std::iter::repeat_n(false, n));
            continue;
        }
        if n < 2 {
            bail!(
                Config,
                "age {age} has {n} sample; a train/test split needs data.tail_min >= 2"
            );
        }
        let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(&[cfg.seed, seed::TAG_SPLIT, age as u64]));
        let mut is_test = vec![false; n];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        out.extend(is_test);
    }
    Ok(out)
}

/// Decoded images with labels and a train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub max_age: usize,
    pub image_size: usize,
    pub ids: Vec<String>,
    pub ages: Vec<usize>,
    pixels: Vec<u8>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// `images` holds `ids.len()` row-major `image_size²` images back to back.
    pub fn from_parts(
        max_age: usize,
        image_size: usize,
        ids: Vec<String>,
        ages: Vec<usize>,
        images: Vec<u8>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if ages.len() != n || images.len() != n * image_size * image_size {
            bail!(
                Shape,
                "{n} ids, {} ages and {} pixels for {image_size}x{image_size} images",
                ages.len(),
                images.len()
            );
        }
        if let Some(&a) = ages.iter().find(|&&a| a > max_age) {
            bail!(Dataset, "label {a} outside [0, {max_age}]");
        }
        if train.iter().chain(&test).any(|&i| i >= n) {
            bail!(Dataset, "split index out of range");
        }
        Ok(Dataset {
            max_age,
            image_size,
            ids,
            ages,
            pixels: images,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let p = self.image_size * self.image_size;
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Normalized `1×S×S` image.
    pub fn image<T: Real>(&self, i: usize) -> Tensor3<T> {
        let s = self.image_size;
        let data = self.raw(i).iter().map(|&v| T::of(normalize_pixel(v))).collect();
        Tensor3::from_vec(1, s, s, data).expect("size checked at construction")
    }

    /// Index over `subset`; ids in the index are positions within `subset`.
    pub fn index_of(&self, subset: &[usize]) -> Result<DatasetIndex> {
        let labels: Vec<usize> = subset.iter().map(|&i| self.ages[i]).collect();
        DatasetIndex::from_labels(&labels, self.max_age + 1)
    }

    pub fn train_index(&self) -> Result<DatasetIndex> {
        self.index_of(&self.train)
    }

    /// A copy holding only `subset`, all of it as training data.
    pub fn select(&self, subset: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(subset.len() * self.image_size * self.image_size);
        for &i in subset {
            pixels.extend_from_slice(self.raw(i));
        }
        Dataset {
            max_age: self.max_age,
            image_size: self.image_size,
            ids: subset.iter().map(|&i| self.ids[i].clone()).collect(),
            ages: subset.iter().map(|&i| self.ages[i]).collect(),
            pixels,
            train: (0..subset.len()).collect(),
            test: Vec::new(),
        }
    }
}

/// Renders the whole benchmark in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    let plan = plan_samples(cfg)?;
    let counts = longtail_counts(cfg)?;
    let is_test = stratified_split(cfg, &counts)?;
    let images: Vec<Vec<u8>> = plan
        .par_iter()
        .map(|s| render_age_image(s.age, s.seed, cfg))
        .collect::<Result<_>>()?;
    let (test, train): (Vec<usize>, Vec<usize>) = (0..plan.len()).partition(|&i| is_test[i]);
    Dataset::from_parts(
        cfg.max_age,
        cfg.image_size,
        plan.iter().map(|s| s.id.clone()).collect(),
        plan.iter().map(|s| s.age).collect(),
        images.concat(),
        train,
        test,
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(pixels: &[u8], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Dataset, "truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        bail!(
            Dataset,
            "expected 8-bit binary PGM, got {} maxval {}",
            fields[0],
            fields[3]
        );
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Dataset(format!("bad PGM dimension '{s}'")))
    };
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        bail!(Dataset, "PGM payload has {} bytes, expected {}", data.len(), w * h);
    }
    Ok((w, h, data.to_vec()))
}

pub struct DatasetSummary {
    pub counts: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Writes the dataset directory described in the module docs.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetSummary> {
    let data = synthesize(cfg)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut labels = String::from("id,filename,age\n");
    let mut split = String::from("id,split\n");
    let mut is_test = vec![false; data.len()];
    for &i in &data.test {
        is_test[i] = true;
    }
    for (i, (id, test)) in data.ids.iter().zip(&is_test).enumerate() {
        let name = format!("images/{id}.pgm");
        write_file(&out.join(&name), &encode_pgm(data.raw(i), data.image_size))?;
        labels.push_str(&format!("{id},{name},{}\n", data.ages[i]));
        split.push_str(&format!("{id},{}\n", if *test { "test" } else { "train" }));
    }
    write_file(&out.join("labels.csv"), labels.as_bytes())?;
    write_file(&out.join("split.csv"), split.as_bytes())?;
    let snap = out.join("config.snapshot");
    let mut f = fs::File::create(&snap).map_err(|e| Error::io(&snap, e))?;
    f.write_all(cfg.snapshot().as_bytes())
        .map_err(|e| Error::io(&snap, e))?;
    Ok(DatasetSummary {
        counts: longtail_counts(cfg)?,
        n_train: data.train.len(),
        n_test: data.test.len(),
    })
}

/// Loads a dataset directory. Without `split.csv` every sample is training
/// data; without `config.snapshot` ages are bounded by the default maximum.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let snap = path.join("config.snapshot");
    let max_age = if snap.exists() {
        let text = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
        SynthConfig::from_snapshot(&text)?.max_age
    } else {
        MAX_AGE
    };
    let manifest: PathBuf = path.join("labels.csv");
    let mut rdr = crate::error::csv_reader(&manifest)?;
    if rdr.headers()?.iter().map(str::trim).collect::<Vec<_>>() != ["id", "filename", "age"] {
        bail!(Dataset, "{}: header must be id,filename,age", manifest.display());
    }
    let (mut ids, mut ages, mut pixels) = (Vec::new(), Vec::new(), Vec::new());
    let mut size = None;
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != 3 {
            bail!(Dataset, "labels.csv line {line}: expected 3 fields");
        }
        let (id, file, age) = (row[0].trim(), row[1].trim(), row[2].trim());
        let age: usize = age
            .parse()
            .map_err(|_| Error::Dataset(format!("labels.csv line {line} ({id}): bad age '{age}'")))?;
        if age > max_age {
            bail!(
                Dataset,
                "labels.csv line {line} ({id}): age {age} outside [0, {max_age}]"
            );
        }
        let img_path = path.join(file);
        let bytes = fs::read(&img_path).map_err(|e| {
            Error::Dataset(format!(
                "labels.csv line {line} ({id}): cannot read {}: {e}",
                img_path.display()
            ))
        })?;
        let (w, h, px) =
            decode_pgm(&bytes).map_err(|e| Error::Dataset(format!("labels.csv line {line} ({id}): {e}")))?;
        if w != h || size.is_some_and(|s| s != w) {
            bail!(
                Dataset,
                "labels.csv line {line} ({id}): image is {w}x{h}, expected equal square sizes"
            );
        }
        size = Some(w);
        ids.push(id.to_string());
        ages.push(age);
        pixels.extend(px);
    }
    let Some(size) = size else {
        bail!(Dataset, "{} lists no samples", manifest.display());
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let split_path = path.join("split.csv");
    if split_path.exists() {
        let pos: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut rdr = crate::error::csv_reader(&split_path)?;
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let Some(&idx) = row.get(0).and_then(|id| pos.get(id.trim())) else {
                bail!(Dataset, "split.csv line {}: unknown id", i + 2);
            };
            match row.get(1).map(str::trim) {
                Some("train") => train.push(idx),
                Some("test") => test.push(idx),
                other => bail!(Dataset, "split.csv line {}: bad split {other:?}", i + 2),
            }
        }
    } else {
        train = (0..ids.len()).collect();
    }
    Dataset::from_parts(max_age, size, ids, ages, pixels, train, test)
}
