//! Source train/val split plus shifted test domains, reproducible from a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_shift, gen_scene, Scene, SceneSpec, ShiftKind, ShiftSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::prompt::Click;

pub const MANIFEST_FILE: &str = "manifest.json";
const SEED_ATTEMPTS: u64 = 16;
const SHIFT_SALT: u64 = 0x5eed_5417_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl DomainSpec {
    pub fn name(&self) -> String {
        format!("{}@{}", self.kind.name(), self.magnitude)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scene: SceneSpec,
    pub train: usize,
    pub val: usize,
    pub ood_per_domain: usize,
    pub base_seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let d = |kind, magnitude| DomainSpec { kind, magnitude };
        Self {
            scene: SceneSpec::default(),
            train: 64,
            val: 16,
            ood_per_domain: 32,
            base_seed: 0,
            domains: vec![
                d(ShiftKind::ColorTransfer, 0.5),
                d(ShiftKind::ColorTransfer, 1.0),
                d(ShiftKind::TextureSwap, 0.5),
                d(ShiftKind::TextureSwap, 1.0),
                d(ShiftKind::Elastic, 2.0),
                d(ShiftKind::Elastic, 4.0),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_seed: u64,
    pub shift_seed: Option<u64>,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub name: String,
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BenchmarkConfig,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub domains: Vec<DomainRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    /// `(domain name, scenes)` in manifest order.
    pub domains: Vec<(String, Vec<Scene>)>,
}

/// Seed layout: base seed from bit 44, retry counter from bit 36, stream from bit 20
/// (0 = source, d + 1 = test domain d), scene index in the low 20 bits.
fn stream_seed(base: u64, stream: u64, index: u64, attempt: u64) -> u64 {
    (base << 44) ^ (attempt << 36) ^ (stream << 20) ^ index
}

fn source_scene(cfg: &BenchmarkConfig, index: u64) -> Result<(Scene, SceneRecord)> {
    for attempt in 0..SEED_ATTEMPTS {
        let seed = stream_seed(cfg.base_seed, 0, index, attempt);
        if let Ok(s) = gen_scene(seed, &cfg.scene) {
            let rec = SceneRecord { scene_seed: seed, shift_seed: None, hash: s.content_hash() };
            return Ok((s, rec));
        }
    }
    Err(Error::Generation(format!("source scene {index}: no feasible seed")))
}

fn shifted_scene(cfg: &BenchmarkConfig, d: usize, index: u64) -> Result<(Scene, SceneRecord)> {
    let dom = &cfg.domains[d];
    for attempt in 0..SEED_ATTEMPTS {
        let seed = stream_seed(cfg.base_seed, d as u64 + 1, index, attempt);
        let Ok(base) = gen_scene(seed, &cfg.scene) else { continue };
        let spec = ShiftSpec { kind: dom.kind, magnitude: dom.magnitude, seed: seed ^ SHIFT_SALT };
        if let Ok(s) = apply_shift(&base, &spec) {
            let rec = SceneRecord { scene_seed: seed, shift_seed: Some(spec.seed), hash: s.content_hash() };
            return Ok((s, rec));
        }
    }
    Err(Error::Generation(format!("domain {} scene {index}: no feasible seed", dom.name())))
}

/// Generates every split; all seeds and content hashes go into the manifest.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.train + cfg.val >= 1 << 20 || cfg.ood_per_domain >= 1 << 20 || cfg.domains.len() >= 1 << 12 {
        return Err(Error::InvalidArgument("benchmark too large for the seed layout".into()));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut rec_train = Vec::new();
    let mut rec_val = Vec::new();
    for i in 0..(cfg.train + cfg.val) {
        let (s, r) = source_scene(cfg, i as u64)?;
        if i < cfg.train {
            train.push(s);
            rec_train.push(r);
        } else {
            val.push(s);
            rec_val.push(r);
        }
    }
    let mut domains = Vec::new();
    let mut recs = Vec::new();
    for (d, dom) in cfg.domains.iter().enumerate() {
        let mut scenes = Vec::new();
        let mut rs = Vec::new();
        for j in 0..cfg.ood_per_domain {
            let (s, r) = shifted_scene(cfg, d, j as u64)?;
            scenes.push(s);
            rs.push(r);
        }
        domains.push((dom.name(), scenes));
        recs.push(DomainRecord { name: dom.name(), kind: dom.kind, magnitude: dom.magnitude, scenes: rs });
    }
    let manifest = Manifest { config: cfg.clone(), train: rec_train, val: rec_val, domains: recs };
    Ok(Benchmark { manifest, train, val, domains })
}

fn scene_from_record(rec: &SceneRecord, dom: Option<&DomainRecord>, spec: &SceneSpec) -> Result<Scene> {
    let base = gen_scene(rec.scene_seed, spec)?;
    let s = match (dom, rec.shift_seed) {
        (Some(d), Some(seed)) => apply_shift(&base, &ShiftSpec { kind: d.kind, magnitude: d.magnitude, seed })?,
        _ => base,
    };
    if s.content_hash() != rec.hash {
        return Err(Error::Format(format!("scene seed {} does not reproduce its recorded hash", rec.scene_seed)));
    }
    Ok(s)
}

impl Benchmark {
    /// Regenerates every scene from recorded seeds and verifies the content hashes.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let spec = &manifest.config.scene;
        let train = manifest.train.iter().map(|r| scene_from_record(r, None, spec)).collect::<Result<_>>()?;
        let val = manifest.val.iter().map(|r| scene_from_record(r, None, spec)).collect::<Result<_>>()?;
        let domains = manifest
            .domains
            .iter()
            .map(|d| Ok((d.name.clone(), d.scenes.iter().map(|r| scene_from_record(r, Some(d), spec)).collect::<Result<_>>()?)))
            .collect::<Result<_>>()?;
        Ok(Self { manifest: manifest.clone(), train, val, domains })
    }

    pub fn domain(&self, name: &str) -> Option<&[Scene]> {
        self.domains.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }

    /// Writes the manifest plus, per scene, `image.rgrd`, `masks.rgrd`, `clicks.json` and `preview.png`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        write_split(&dir.join("train"), &self.train)?;
        write_split(&dir.join("val"), &self.val)?;
        for (name, scenes) in &self.domains {
            write_split(&dir.join("ood").join(name), scenes)?;
        }
        Ok(())
    }
}

fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        let d = dir.join(format!("{i:04}"));
        std::fs::create_dir_all(&d)?;
        s.image.save(d.join("image.rgrd"))?;
        Grid::stack(&s.masks)?.save(d.join("masks.rgrd"))?;
        std::fs::write(d.join("clicks.json"), serde_json::to_string(&s.clicks)?)?;
        s.image.save_rgb_png_unit(d.join("preview.png"))?;
    }
    Ok(())
}

fn read_split(dir: &Path, recs: &[SceneRecord]) -> Result<Vec<Scene>> {
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let d = dir.join(format!("{i:04}"));
            let image = Grid::load(d.join("image.rgrd"))?;
            let stacked = Grid::load(d.join("masks.rgrd"))?;
            let (k, _, _) = stacked.chw();
            let masks = (0..k).map(|j| stacked.channel(j)).collect();
            let clicks: Vec<Vec<Click>> = serde_json::from_str(&std::fs::read_to_string(d.join("clicks.json"))?)?;
            let s = Scene { image, masks, clicks, seed: r.scene_seed };
            if s.content_hash() != r.hash {
                return Err(Error::Format(format!("{} does not match its manifest hash", d.display())));
            }
            Ok(s)
        })
        .collect()
}

/// Loads a benchmark written by [`Benchmark::write`], verifying every hash.
pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Format(format!("missing benchmark manifest {}", path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let train = read_split(&dir.join("train"), &manifest.train)?;
    let val = read_split(&dir.join("val"), &manifest.val)?;
    let domains = manifest
        .domains
        .iter()
        .map(|d| Ok((d.name.clone(), read_split(&dir.join("ood").join(&d.name), &d.scenes)?)))
        .collect::<Result<_>>()?;
    Ok(Benchmark { manifest, train, val, domains })
}
