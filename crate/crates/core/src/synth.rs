//! Seeded desk-scale corpora with paired region features.
//!
//! Two families of records are generated:
//!
//! * **text**: a key token in the sentence names the answer outright
//!   (`key<i>` ⇔ `ans<i>`); the video features are pure noise.
//! * **visual**: a group token only narrows the answer to a block of
//!   `ambiguity` classes. One region of the video, chosen uniformly, carries
//!   the class signature (a zero-mean orthonormal code scaled to
//!   `amplitude × noise` per entry) that resolves the rest.
//!
//! Visual records cycle deterministically through (template, group, class)
//! so every template/group bucket holds each of its candidate answers
//! equally often whenever the family size is a multiple of the cycle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{feature_path, format_dataset_line, write_atomic, write_feature_file};
use crate::tensor::Tensor;
use crate::text::BLANK_MARKER;

const TEMPLATES: [&str; 4] = [
    "the {ctx} man {blank} the door",
    "someone {blank} the {ctx} box slowly",
    "a woman with the {ctx} {blank}",
    "{blank} near the {ctx} car",
];
const FILLERS: [&str; 11] = [
    "the", "man", "door", "someone", "box", "slowly", "a", "woman", "with", "near", "car",
];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub regions: usize,
    pub channels: usize,
    pub n_answers: usize,
    pub ambiguity: usize,
    /// Fraction of records drawn from the visual family.
    pub visual_fraction: f64,
    /// Signature strength in units of the noise standard deviation.
    pub amplitude: f64,
    pub noise: f64,
    pub frames: usize,
    pub emb_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            regions: 16,
            channels: 32,
            n_answers: 8,
            ambiguity: 4,
            visual_fraction: 0.5,
            amplitude: 3.0,
            noise: 0.5,
            frames: 2,
            emb_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Text,
    Visual,
}

/// One manifest line: which family a record came from and, for visual
/// records, where its signature sits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub family: Family,
    /// `-1` for text records.
    pub region: i64,
    pub class: usize,
}

/// Paths of everything [`gen_corpus`] wrote.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub root: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub features: PathBuf,
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
}

impl CorpusPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            train: root.join("train.tsv"),
            val: root.join("val.tsv"),
            test: root.join("test.tsv"),
            features: root.join("features"),
            embeddings: root.join("embeddings.txt"),
            manifest: root.join("manifest.tsv"),
            root,
        }
    }

    pub fn split(&self, name: &str) -> &Path {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regions < 2 || self.channels < 2 {
            return bad(format!(
                "need R, C >= 2, got R={} C={}",
                self.regions, self.channels
            ));
        }
        if self.n_answers < 2 {
            return bad("need at least 2 answer classes".into());
        }
        if self.ambiguity == 0 || self.ambiguity > self.n_answers {
            return bad(format!(
                "ambiguity {} must be in 1..={}",
                self.ambiguity, self.n_answers
            ));
        }
        if !self.n_answers.is_multiple_of(self.ambiguity) {
            return bad(format!(
                "answer classes {} must split evenly into groups of {}",
                self.n_answers, self.ambiguity
            ));
        }
        if self.n_answers >= self.channels {
            return bad(format!(
                "{} zero-mean orthogonal class codes need more than {} channels",
                self.n_answers, self.channels
            ));
        }
        if !(0.0..=1.0).contains(&self.visual_fraction) {
            return bad("visual fraction must lie in [0, 1]".into());
        }
        if !(self.amplitude > 0.0 && self.noise > 0.0) {
            return bad("amplitude and noise must be positive".into());
        }
        if self.frames == 0 || self.emb_dim == 0 {
            return bad("frames and embedding width must be positive".into());
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.n_answers / self.ambiguity
    }

    pub fn answer_word(class: usize) -> String {
        format!("ans{class}")
    }

    /// Orthonormal, zero-mean class codes (one row per class, length C).
    pub fn class_codes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(7);
        let c = self.channels;
        let ones = vec![1.0 / (c as f64).sqrt(); c];
        let mut basis: Vec<Vec<f64>> = vec![ones];
        let mut codes = Vec::with_capacity(self.n_answers);
        while codes.len() < self.n_answers {
            let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v.clone());
            codes.push(v);
        }
        codes
    }
}

fn fill(template: &str, ctx: &str) -> String {
    template
        .replace("{ctx}", ctx)
        .replace("{blank}", BLANK_MARKER)
}

fn vocabulary(cfg: &SynthConfig) -> Vec<String> {
    let mut words: Vec<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    words.extend((0..cfg.n_answers).map(|i| format!("key{i}")));
    words.extend((0..cfg.groups()).map(|g| format!("grp{g}")));
    words.extend((0..cfg.n_answers).map(SynthConfig::answer_word));
    words
}

/// Writes `train/val/test.tsv`, one `features/<id>.vfb` per record,
/// `embeddings.txt` and `manifest.tsv` under `out_dir`. The same config
/// always produces byte-identical files.
pub fn gen_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<CorpusPaths> {
    cfg.validate()?;
    let paths = CorpusPaths::new(out_dir.as_ref());
    fs::create_dir_all(&paths.features).map_err(|e| Error::io(&paths.features, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let codes = cfg.class_codes();
    let scale = cfg.amplitude * cfg.noise * (cfg.channels as f64).sqrt();

    let words = vocabulary(cfg);
    let mut emb = format!("{} {}\n", words.len(), cfg.emb_dim);
    for w in &words {
        let v: Vec<f64> = (0..cfg.emb_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        emb.push_str(w);
        for x in v {
            emb.push_str(&format!(" {:.6}", x / n));
        }
        emb.push('\n');
    }
    write_atomic(&paths.embeddings, emb.as_bytes())?;

    let cycle = TEMPLATES.len() * cfg.groups() * cfg.ambiguity;
    let mut manifest = String::new();
    for (split, n) in SPLITS.iter().zip([cfg.n_train, cfg.n_val, cfg.n_test]) {
        let n_visual = (n as f64 * cfg.visual_fraction).round() as usize;
        let mut families: Vec<Family> = (0..n)
            .map(|i| {
                if i < n_visual {
                    Family::Visual
                } else {
                    Family::Text
                }
            })
            .collect();
        families.shuffle(&mut rng);

        let (mut n_text, mut n_vis) = (0usize, 0usize);
        let mut lines = String::new();
        for (i, fam) in families.into_iter().enumerate() {
            let id = format!("{split}-{i:05}");
            let (sentence, class, region) = match fam {
                Family::Text => {
                    let class = n_text % cfg.n_answers;
                    n_text += 1;
                    let t = TEMPLATES.choose(&mut rng).expect("templates");
                    (fill(t, &format!("key{class}")), class, None)
                }
                Family::Visual => {
                    let combo = n_vis % cycle;
                    n_vis += 1;
                    let template = combo % TEMPLATES.len();
                    let group = (combo / TEMPLATES.len()) % cfg.groups();
                    let member = combo / (TEMPLATES.len() * cfg.groups());
                    let class = group * cfg.ambiguity + member;
                    let region = rng.random_range(0..cfg.regions);
                    (
                        fill(TEMPLATES[template], &format!("grp{group}")),
                        class,
                        Some(region),
                    )
                }
            };

            let (r, c) = (cfg.regions, cfg.channels);
            let mut frames = Tensor::from_fn(&[cfg.frames, r, c], |_| noise.sample(&mut rng));
            if let Some(reg) = region {
                let data = frames.data_mut();
                for t in 0..cfg.frames {
                    let row = &mut data[(t * r + reg) * c..(t * r + reg + 1) * c];
                    row.iter_mut()
                        .zip(&codes[class])
                        .for_each(|(x, q)| *x += scale * q);
                }
            }
            write_feature_file(feature_path(&paths.features, &id), &frames)?;

            lines.push_str(&format_dataset_line(
                &id,
                &sentence,
                &SynthConfig::answer_word(class),
            ));
            let (fam_name, reg) = match region {
                Some(r) => ("visual", r as i64),
                None => ("text", -1),
            };
            manifest.push_str(&format!("{id}\t{fam_name}\t{reg}\t{class}\n"));
        }
        write_atomic(paths.split(split), lines.as_bytes())?;
    }
    write_atomic(&paths.manifest, manifest.as_bytes())?;
    Ok(paths)
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{origin}:{}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        let [id, fam, region, class] = f.as_slice() else {
            return Err(Error::format(at(), "expected 4 tab-separated fields"));
        };
        let family = match *fam {
            "text" => Family::Text,
            "visual" => Family::Visual,
            other => return Err(Error::format(at(), format!("unknown family {other:?}"))),
        };
        out.push(ManifestEntry {
            video_id: id.to_string(),
            family,
            region: region
                .parse()
                .map_err(|_| Error::format(at(), format!("bad region {region:?}")))?,
            class: class
                .parse()
                .map_err(|_| Error::format(at(), format!("bad class {class:?}")))?,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    parse_manifest(&crate::io::read_text(path)?, &path.display().to_string())
}
