//! Run configuration: a flat `key=value` file.
//!
//! Blank lines and lines starting with `#` are ignored, unknown keys are
//! rejected and omitted keys keep their defaults. See [`RunConfig::encode`]
//! for the complete key list.

use std::path::Path;
use std::str::FromStr;

use docsegtr_core::maskgen::InferenceConfig;
use docsegtr_core::model::ModelConfig;
use docsegtr_core::training::{LossConfig, OptimizerState};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub infer: InferenceConfig,
    /// Parameter initialization seed.
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub milestones: Vec<u64>,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            infer: InferenceConfig::default(),
            seed: 0,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-5,
            warmup_iters: 100,
            milestones: vec![1400, 1667],
            batch_size: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        match key {
            "input_height" => m.input_h = parse(key, v)?,
            "input_width" => m.input_w = parse(key, v)?,
            "c_stem" => m.c_stem = parse(key, v)?,
            "c_fpn" => m.c_fpn = parse(key, v)?,
            "c_mask" => m.c_mask = parse(key, v)?,
            "grid" => m.grid = parse(key, v)?,
            "theta" => m.theta = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "num_layers" => m.num_layers = parse(key, v)?,
            "num_heads" => m.num_heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "use_transformer" => m.use_transformer = parse_bool(key, v)?,
            "use_attention" => m.use_attention = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "milestones" => {
                self.milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "focal_alpha" => self.loss.alpha = parse(key, v)?,
            "focal_gamma" => self.loss.gamma = parse(key, v)?,
            "lambda_mask" => self.loss.lambda_mask = parse(key, v)?,
            "score_thr" => self.infer.score_thr = parse(key, v)?,
            "mask_thr" => self.infer.mask_thr = parse(key, v)?,
            "nms_sigma" => self.infer.nms_sigma = parse(key, v)?,
            "top_k" => self.infer.top_k = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Every key with its current value, in the documented order.
    pub fn encode(&self) -> String {
        let m = &self.model;
        let ms: Vec<String> = self.milestones.iter().map(u64::to_string).collect();
        format!(
            "input_height={}\ninput_width={}\nc_stem={}\nc_fpn={}\nc_mask={}\ngrid={}\ntheta={}\n\
             num_classes={}\nnum_layers={}\nnum_heads={}\nmlp_ratio={}\nuse_transformer={}\n\
             use_attention={}\nseed={}\nlr={}\nmomentum={}\nweight_decay={}\nwarmup_iters={}\n\
             milestones={}\nbatch_size={}\nfocal_alpha={}\nfocal_gamma={}\nlambda_mask={}\n\
             score_thr={}\nmask_thr={}\nnms_sigma={}\ntop_k={}\n",
            m.input_h,
            m.input_w,
            m.c_stem,
            m.c_fpn,
            m.c_mask,
            m.grid,
            m.theta,
            m.num_classes,
            m.num_layers,
            m.num_heads,
            m.mlp_ratio,
            m.use_transformer,
            m.use_attention,
            self.seed,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.warmup_iters,
            ms.join(","),
            self.batch_size,
            self.loss.alpha,
            self.loss.gamma,
            self.loss.lambda_mask,
            self.infer.score_thr,
            self.infer.mask_thr,
            self.infer.nms_sigma,
            self.infer.top_k,
        )
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(
            self.lr,
            self.momentum,
            self.weight_decay,
            self.warmup_iters,
            self.milestones.clone(),
        )
    }

    pub fn validate(&self) -> docsegtr_core::Result<()> {
        self.model.validate()?;
        self.infer.validate()?;
        self.optimizer().validate()?;
        let l = &self.loss;
        if !(l.alpha >= 0.0 && l.alpha <= 1.0 && l.gamma >= 0.0 && l.lambda_mask >= 0.0) {
            return Err(docsegtr_core::Error::Config(
                "need 0 <= focal_alpha <= 1, focal_gamma >= 0, lambda_mask >= 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(docsegtr_core::Error::Config(
                "batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::parse(&text).map_err(|m| AppError::Usage(format!("{}: {m}", path.display())))
    }
}
