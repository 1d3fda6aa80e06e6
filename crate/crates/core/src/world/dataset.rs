//! On-disk datasets: a text manifest plus one container per scenario.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/samples/000000.bev
//! ```
//!
//! Sample arrays:
//! * `input` f32 `[(t_in+1)*3, H, W]`, history raster (see [`input_raster`])
//! * `f{k}.ids` u32 `[H, W]` for `k = 0..=t_out` (frame `t_in + k`)
//! * `f{k}.flow` f32 `[2, H, W]`, `f{k}.flow_valid` u8 `[H, W]`
//! * `f{k}.box_ids` u32 `[n]`, `f{k}.boxes` f64 `[n, 8]` as
//!   `cx, cy, length, width, yaw, vx, vy, yaw_rate`, `f{k}.classes` u32 `[n]`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    generate_scenario, input_raster, rasterize_frame, AgentBox, BevFrameGT, GridSpec, ScenarioConfig,
    RASTER_CHANNELS,
};
use crate::container::{Container, FORMAT_VERSION};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub world: ScenarioConfig,
    pub num_scenarios: usize,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: ScenarioConfig::default(),
            num_scenarios: 200,
            master_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub grid: GridSpec,
    pub t_in: usize,
    pub t_out: usize,
    pub dt: f64,
    pub master_seed: u64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub checksums: Vec<String>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# bevpred dataset manifest\n");
        let _ = writeln!(s, "format_version = {}", self.format_version);
        let _ = writeln!(s, "grid_height = {}", self.grid.height);
        let _ = writeln!(s, "grid_width = {}", self.grid.width);
        let _ = writeln!(s, "grid_resolution = {}", self.grid.resolution);
        let _ = writeln!(s, "t_in = {}", self.t_in);
        let _ = writeln!(s, "t_out = {}", self.t_out);
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "num_scenarios = {}", self.seeds.len());
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let join = |v: Vec<String>| v.join(",");
        let _ = writeln!(s, "seeds = {}", join(self.seeds.iter().map(u64::to_string).collect()));
        let _ = writeln!(s, "sample_sha256 = {}", join(self.checksums.clone()));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line without '=': {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::Data(format!("manifest missing {k}")))?
                .parse()
                .map_err(|_| Error::Data(format!("manifest field {k} unparsable")))
        }
        let version: u32 = get(&kv, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let list = |k: &str| -> Result<Vec<String>> {
            let v: String = get(&kv, k)?;
            Ok(if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(str::to_string).collect()
            })
        };
        let seeds = list("seeds")?
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Data(format!("bad seed {s:?}"))))
            .collect::<Result<Vec<u64>>>()?;
        let checksums = list("sample_sha256")?;
        let n: usize = get(&kv, "num_scenarios")?;
        if seeds.len() != n || checksums.len() != n {
            return Err(Error::Data(format!(
                "manifest lists {} seeds and {} checksums for {n} scenarios",
                seeds.len(),
                checksums.len()
            )));
        }
        Ok(Self {
            format_version: version,
            grid: GridSpec::new(
                get(&kv, "grid_height")?,
                get(&kv, "grid_width")?,
                get(&kv, "grid_resolution")?,
            )?,
            t_in: get(&kv, "t_in")?,
            t_out: get(&kv, "t_out")?,
            dt: get(&kv, "dt")?,
            master_seed: get(&kv, "master_seed")?,
            config_hash: get(&kv, "config_hash")?,
            seeds,
            checksums,
        })
    }

    /// SHA-256 of the manifest text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn config_hash(cfg: &ScenarioConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serialises")))
}

/// Per-scenario seeds drawn from the master seed.
pub fn scenario_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// One training example: history raster plus ground truth for the current
/// frame and every future frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub t_in: usize,
    pub input: Vec<f32>,
    /// `frames[k]` is scenario frame `t_in + k`, `k = 0..=t_out`.
    pub frames: Vec<BevFrameGT>,
}

impl Sample {
    pub fn t_out(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn input_channels(&self) -> usize {
        (self.t_in + 1) * RASTER_CHANNELS
    }

    pub fn input_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.input_channels(), self.grid.height, self.grid.width],
            self.input.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_scenario(index: usize, seed: u64, cfg: &ScenarioConfig) -> Result<Self> {
        let scn = generate_scenario(seed, cfg)?;
        let frames = (scn.t_in..scn.num_frames())
            .map(|t| rasterize_frame(&scn, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            index,
            seed,
            grid: scn.grid,
            t_in: scn.t_in,
            input: input_raster(&scn),
            frames,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let g = self.grid;
        let (h, w) = (g.height, g.width);
        let mut c = Container::new("sample");
        c.set_attr("index", self.index.to_string());
        c.set_attr("seed", self.seed.to_string());
        c.set_attr("t_in", self.t_in.to_string());
        c.set_attr("t_out", self.t_out().to_string());
        c.set_attr("grid", format!("{}x{}@{}", h, w, g.resolution));
        c.put_f32("input", &[self.input_channels(), h, w], &self.input)?;
        for (k, f) in self.frames.iter().enumerate() {
            c.put_u32(&format!("f{k}.ids"), &[h, w], &f.instance_ids)?;
            c.put_f32(&format!("f{k}.flow"), &[2, h, w], &f.backward_flow)?;
            c.put_bool(&format!("f{k}.flow_valid"), &[h, w], &f.flow_valid)?;
            let ids: Vec<u32> = f.boxes.keys().copied().collect();
            let boxes: Vec<f64> = f
                .boxes
                .values()
                .flat_map(|b| [b.cx, b.cy, b.length, b.width, b.yaw, b.vx, b.vy, b.yaw_rate])
                .collect();
            let classes: Vec<u32> = ids.iter().map(|i| f.classes[i]).collect();
            c.put_u32(&format!("f{k}.box_ids"), &[ids.len()], &ids)?;
            c.put_f64(&format!("f{k}.boxes"), &[ids.len(), 8], &boxes)?;
            c.put_u32(&format!("f{k}.classes"), &[ids.len()], &classes)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, grid: GridSpec) -> Result<Self> {
        let attr = |k: &str| -> Result<usize> {
            c.require_attr(k)?
                .parse()
                .map_err(|_| Error::Data(format!("sample attribute {k} unparsable")))
        };
        let t_in = attr("t_in")?;
        let t_out = attr("t_out")?;
        let (shape, input) = c.get_f32("input")?;
        let (h, w) = (grid.height, grid.width);
        if shape != [(t_in + 1) * RASTER_CHANNELS, h, w] {
            return Err(Error::Data(format!("sample input shape {shape:?} does not match grid")));
        }
        let mut frames = Vec::with_capacity(t_out + 1);
        for k in 0..=t_out {
            let (_, ids) = c.get_u32(&format!("f{k}.ids"))?;
            let (_, flow) = c.get_f32(&format!("f{k}.flow"))?;
            let (_, valid) = c.get_bool(&format!("f{k}.flow_valid"))?;
            let (_, box_ids) = c.get_u32(&format!("f{k}.box_ids"))?;
            let (_, raw) = c.get_f64(&format!("f{k}.boxes"))?;
            let (_, cls) = c.get_u32(&format!("f{k}.classes"))?;
            if ids.len() != h * w || flow.len() != 2 * h * w || raw.len() != 8 * box_ids.len() {
                return Err(Error::Data(format!("frame {k} arrays inconsistent")));
            }
            let mut boxes = BTreeMap::new();
            let mut classes = BTreeMap::new();
            for (j, id) in box_ids.iter().enumerate() {
                let b = &raw[8 * j..8 * j + 8];
                boxes.insert(
                    *id,
                    AgentBox {
                        cx: b[0],
                        cy: b[1],
                        length: b[2],
                        width: b[3],
                        yaw: b[4],
                        vx: b[5],
                        vy: b[6],
                        yaw_rate: b[7],
                    },
                );
                classes.insert(*id, cls[j]);
            }
            frames.push(BevFrameGT {
                grid,
                frame: t_in + k,
                instance_ids: ids,
                backward_flow: flow,
                flow_valid: valid,
                boxes,
                classes,
            });
        }
        Ok(Self {
            index: attr("index")?,
            seed: c
                .require_attr("seed")?
                .parse()
                .map_err(|_| Error::Data("sample seed unparsable".into()))?,
            grid,
            t_in,
            input,
            frames,
        })
    }
}

pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("samples").join(format!("{index:06}.bev"))
}

/// Generates and writes every scenario, then the manifest.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.world.validate()?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let seeds = scenario_seeds(cfg.master_seed, cfg.num_scenarios);
    let mut checksums = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let bytes = Sample::from_scenario(i, seed, &cfg.world)?.to_container()?.to_bytes();
        checksums.push(hex::encode(Sha256::digest(&bytes)));
        let p = sample_path(out_dir, i);
        std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        grid: cfg.world.grid,
        t_in: cfg.world.t_in,
        t_out: cfg.world.t_out,
        dt: cfg.world.dt,
        master_seed: cfg.master_seed,
        config_hash: config_hash(&cfg.world),
        seeds,
        checksums,
    };
    let p = out_dir.join(MANIFEST_FILE);
    std::fs::write(&p, manifest.to_text()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Manifest::parse(&text)
}

/// Reads sample `index`, verifying the manifest checksum and the container's
/// own payload checksum.
pub fn load_sample(dir: &Path, manifest: &Manifest, index: usize) -> Result<Sample> {
    if index >= manifest.len() {
        return Err(Error::OutOfRange {
            index,
            len: manifest.len(),
        });
    }
    let p = sample_path(dir, index);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.checksums[index] {
        return Err(Error::Checksum { path: p });
    }
    let c = Container::from_bytes(&bytes, &p)?;
    let s = Sample::from_container(&c, manifest.grid)?;
    if s.seed != manifest.seeds[index] || s.index != index {
        return Err(Error::Data(format!("{} does not match the manifest entry", p.display())));
    }
    Ok(s)
}

/// In-memory dataset, convenient for training and tests.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let samples = (0..manifest.len())
            .map(|i| load_sample(dir, &manifest, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    /// Generates samples without touching the disk.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let seeds = scenario_seeds(cfg.master_seed, cfg.num_scenarios);
        let samples = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| Sample::from_scenario(i, s, &cfg.world))
            .collect::<Result<Vec<_>>>()?;
        let checksums = samples
            .iter()
            .map(|s| Ok(hex::encode(Sha256::digest(s.to_container()?.to_bytes()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                grid: cfg.world.grid,
                t_in: cfg.world.t_in,
                t_out: cfg.world.t_out,
                dt: cfg.world.dt,
                master_seed: cfg.master_seed,
                config_hash: config_hash(&cfg.world),
                seeds,
                checksums,
            },
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        let mut world = ScenarioConfig::default();
        world.grid = GridSpec::new(24, 24, 0.5).unwrap();
        world.spawn_half_extent = 5.0;
        world.min_gap = 3.0;
        DatasetConfig {
            world,
            num_scenarios: 4,
            master_seed: 11,
        }
    }

    #[test]
    fn build_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = build_dataset(&cfg, dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let s = load_sample(dir.path(), &m, 0).unwrap();
        let direct = Sample::from_scenario(0, m.seeds[0], &cfg.world).unwrap();
        assert_eq!(s, direct);
        assert_eq!(s.frames.len(), cfg.world.t_out + 1);
        let mem = Dataset::generate(&cfg).unwrap();
        assert_eq!(mem.manifest, m);
    }

    #[test]
    fn manifest_hash_is_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small();
        let ma = build_dataset(&cfg, a.path()).unwrap();
        let mb = build_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma.hash(), mb.hash());
        let fa = std::fs::read(sample_path(a.path(), 2)).unwrap();
        let fb = std::fs::read(sample_path(b.path(), 2)).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), dir.path()).unwrap();
        assert!(matches!(
            load_sample(dir.path(), &m, 4),
            Err(Error::OutOfRange { index: 4, len: 4 })
        ));
        let p = sample_path(dir.path(), 1);
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_sample(dir.path(), &m, 1), Err(Error::Checksum { .. })));
        let text = m.to_text().replace("format_version = 1", "format_version = 2");
        assert!(matches!(Manifest::parse(&text), Err(Error::Version { found: 2, .. })));
    }
}
