//! Run configuration: plain `key = value` text, every key optional, with
//! the desk-scale defaults filled in.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowprune::{
    decode_image, Budget, Model, SearchSpace, StageLayout, ToyModelConfig, WorkloadSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    /// Synthetic sample count (ignored when an image directory is set).
    pub samples: usize,
    pub image_dir: Option<PathBuf>,
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub workload_seed: u64,
    pub layout: StageLayout,
    pub budget: f64,
    pub r1_bounds: (f64, f64),
    pub r2_bounds: (f64, f64),
    pub t_bounds: (f64, f64),
    pub alpha_bounds: (f64, f64),
    pub a_bounds: (usize, usize),
    pub iterations: usize,
    pub init_count: usize,
    pub seed: u64,
    pub xi: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            samples: 30,
            image_dir: None,
            image_width: 64,
            image_height: 64,
            patch_size: 8,
            workload_seed: 101,
            layout: StageLayout::new(4, 4, 4).expect("static layout"),
            budget: 0.25,
            r1_bounds: (0.05, 1.0),
            r2_bounds: (0.05, 1.0),
            t_bounds: (0.25, 2.0),
            alpha_bounds: (0.0, 1.0),
            a_bounds: (1, 8),
            iterations: 50,
            init_count: 10,
            seed: 7,
            xi: 0.01,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            config.apply_text(&text)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                );
            };
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| anyhow::anyhow!("bad value for `{key}`: `{value}`"))
        }
        match key {
            "hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "vit_layers" => self.model.vit_layers = num(key, value)?,
            "lm_layers" => self.model.lm_layers = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "ffn_dim" => self.model.ffn_dim = num(key, value)?,
            "text_len" => self.model.text_len = num(key, value)?,
            "model_seed" => self.model.seed = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "image_dir" => self.image_dir = Some(PathBuf::from(value)),
            "image_width" => self.image_width = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "workload_seed" => self.workload_seed = num(key, value)?,
            "layout" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num("layout", p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    bail!("layout needs three comma-separated layer counts");
                }
                self.layout = StageLayout::new(parts[0], parts[1], parts[2])?;
            }
            "budget" => self.budget = num(key, value)?,
            "r1_min" => self.r1_bounds.0 = num(key, value)?,
            "r1_max" => self.r1_bounds.1 = num(key, value)?,
            "r2_min" => self.r2_bounds.0 = num(key, value)?,
            "r2_max" => self.r2_bounds.1 = num(key, value)?,
            "t_min" => self.t_bounds.0 = num(key, value)?,
            "t_max" => self.t_bounds.1 = num(key, value)?,
            "alpha_min" => self.alpha_bounds.0 = num(key, value)?,
            "alpha_max" => self.alpha_bounds.1 = num(key, value)?,
            "a_min" => self.a_bounds.0 = num(key, value)?,
            "a_max" => self.a_bounds.1 = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "init_count" => self.init_count = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "xi" => self.xi = num(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        Budget::new(self.budget)?;
        if self.layout.total() != self.model.lm_layers {
            bail!(
                "layout spans {} layers but lm_layers is {}",
                self.layout.total(),
                self.model.lm_layers
            );
        }
        if self.image_dir.is_none()
            && (self.patch_size == 0
                || !self.image_width.is_multiple_of(self.patch_size)
                || !self.image_height.is_multiple_of(self.patch_size))
        {
            bail!(
                "image {}x{} not divisible by patch size {}",
                self.image_width,
                self.image_height,
                self.patch_size
            );
        }
        if let Some(dir) = &self.image_dir {
            if !dir.is_dir() {
                bail!("image_dir {} does not exist", dir.display());
            }
        }
        self.search_space(false).validate()?;
        Ok(())
    }

    pub fn search_space(&self, uniform_stages: bool) -> SearchSpace {
        SearchSpace {
            r1_bounds: self.r1_bounds,
            r2_bounds: self.r2_bounds,
            t_bounds: self.t_bounds,
            alpha_bounds: self.alpha_bounds,
            a_bounds: self.a_bounds,
            layout: self.layout,
            budget: Budget { r_bar: self.budget },
            uniform_stages,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        Ok(Model::build(self.model)?)
    }

    /// The workload: images from `image_dir` (sorted by file name) or the
    /// seeded synthetic set. Text seeds come from the workload seed either
    /// way.
    pub fn workload(&self) -> Result<Vec<WorkloadSample>> {
        match &self.image_dir {
            None => Ok(flowprune::synthetic_workload(
                self.samples,
                self.workload_seed,
                self.image_width,
                self.image_height,
                self.patch_size,
            )),
            Some(dir) => {
                let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                    .with_context(|| format!("reading image_dir {}", dir.display()))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("pgm") | Some("ppm")
                        )
                    })
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    bail!("image_dir {} holds no .pgm/.ppm files", dir.display());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.workload_seed);
                paths
                    .iter()
                    .map(|path| {
                        let bytes = fs::read(path)
                            .with_context(|| format!("reading image {}", path.display()))?;
                        let image = decode_image(&bytes)
                            .with_context(|| format!("decoding {}", path.display()))?;
                        let sample = WorkloadSample {
                            image,
                            patch_size: self.patch_size,
                            text_seed: rng.random(),
                        };
                        sample
                            .validate()
                            .with_context(|| format!("validating {}", path.display()))?;
                        Ok(sample)
                    })
                    .collect()
            }
        }
    }
}
