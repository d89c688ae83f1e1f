//! Flat key-value run configuration: UTF-8 text, `key = value` lines, `#`
//! comments. Every key is validated against the schema; unknown keys and
//! type mismatches are rejected with the offending line number.

use std::collections::BTreeMap;
use std::path::Path;

use fresco_core::degrade::{DegradationSpec, SceneSpec, SpatialKind};
use fresco_core::hsr::{HsrConfig, NetSpec};
use fresco_core::msr::{LambdaGrid, MsrConfig, StepRule};
use fresco_core::pm::PmEstimatorConfig;
use fresco_core::synth::SceneDims;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    UInt,
    Int,
    Float,
    Text,
    Flag,
}

/// `key -> (type, description)`; the single source of truth for validation.
const SCHEMA: &[(&str, Kind)] = &[
    // Synthetic coupled-scene dimensions.
    ("synth.i_h", Kind::UInt),
    ("synth.j_h", Kind::UInt),
    ("synth.k_h", Kind::UInt),
    ("synth.i_m", Kind::UInt),
    ("synth.j_m", Kind::UInt),
    ("synth.k_m", Kind::UInt),
    ("synth.l_h", Kind::UInt),
    ("synth.l_m", Kind::UInt),
    ("synth.r", Kind::UInt),
    ("synth.seed", Kind::UInt),
    // Scene extraction from a source cube.
    ("scene.source", Kind::Text),
    ("scene.msi_window", Kind::Text),
    ("scene.hsi_window", Kind::Text),
    ("scene.shift", Kind::Int),
    ("scene.rotation_deg", Kind::Float),
    ("scene.kind", Kind::Text),
    ("scene.s", Kind::UInt),
    ("scene.k_m", Kind::UInt),
    // Unmixing.
    ("msr.r", Kind::UInt),
    ("msr.l_h", Kind::UInt),
    ("msr.l_m", Kind::UInt),
    ("msr.lambda_lr", Kind::Float),
    ("msr.lambda_sto", Kind::Float),
    ("msr.lambda_tv", Kind::Float),
    ("msr.lambda_neg", Kind::Float),
    ("msr.p", Kind::Float),
    ("msr.q", Kind::Float),
    ("msr.tau", Kind::Float),
    ("msr.epsilon", Kind::Float),
    ("msr.max_iters", Kind::UInt),
    ("msr.rel_tol", Kind::Float),
    ("msr.step", Kind::Text),
    ("msr.seed", Kind::UInt),
    ("msr.restarts", Kind::UInt),
    ("msr.obj_tol", Kind::Float),
    ("msr.refine_iters", Kind::UInt),
    ("msr.hops", Kind::UInt),
    ("msr.grid", Kind::Text),
    // Response estimation.
    ("pm.estimate", Kind::Flag),
    ("pm.omega", Kind::Text),
    ("pm.max_iters", Kind::UInt),
    ("pm.step", Kind::Float),
    ("pm.rel_tol", Kind::Float),
    ("pm.seed", Kind::UInt),
    // Adversarial stage.
    ("hsr.lambda_inv", Kind::Float),
    ("hsr.lambda_scale", Kind::Float),
    ("hsr.batch", Kind::UInt),
    ("hsr.t_max", Kind::UInt),
    ("hsr.lr0", Kind::Float),
    ("hsr.d_lr_factor", Kind::Float),
    ("hsr.instance_noise", Kind::Float),
    ("hsr.beta1", Kind::Float),
    ("hsr.beta2", Kind::Float),
    ("hsr.seed", Kind::UInt),
    ("hsr.b_h", Kind::UInt),
    ("hsr.width_divisor", Kind::UInt),
    // Evaluation.
    ("eval.s", Kind::Float),
    ("eval.preview_bands", Kind::Text),
];

/// Parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::usage(format!(
                    "{origin}:{lineno}: expected `key = value`, got `{line}`"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let Some((_, kind)) = SCHEMA.iter().find(|(k, _)| *k == key) else {
                return Err(CliError::usage(format!(
                    "{origin}:{lineno}: unknown key `{key}`"
                )));
            };
            validate_kind(&key, &value, *kind)
                .map_err(|e| CliError::usage(format!("{origin}:{lineno}: {e}")))?;
            if values.insert(key.clone(), value).is_some() {
                return Err(CliError::usage(format!(
                    "{origin}:{lineno}: duplicate key `{key}`"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::usage(format!("missing required config key `{key}`")))
    }

    pub fn uint(&self, key: &str, default: usize) -> usize {
        self.get(key).map(|v| v.parse().expect("validated")).unwrap_or(default)
    }

    pub fn required_uint(&self, key: &str) -> Result<usize, CliError> {
        Ok(self.required(key)?.parse().expect("validated"))
    }

    pub fn float(&self, key: &str, default: f64) -> f64 {
        self.get(key).map(|v| v.parse().expect("validated")).unwrap_or(default)
    }

    pub fn int(&self, key: &str, default: i64) -> i64 {
        self.get(key).map(|v| v.parse().expect("validated")).unwrap_or(default)
    }

    pub fn flag(&self, key: &str, default: bool) -> bool {
        self.get(key).map(|v| v == "true").unwrap_or(default)
    }

    /// Synthetic scene dimensions (`synth.*`), all required.
    pub fn scene_dims(&self) -> Result<SceneDims, CliError> {
        Ok(SceneDims {
            i_h: self.required_uint("synth.i_h")?,
            j_h: self.required_uint("synth.j_h")?,
            k_h: self.required_uint("synth.k_h")?,
            i_m: self.required_uint("synth.i_m")?,
            j_m: self.required_uint("synth.j_m")?,
            k_m: self.required_uint("synth.k_m")?,
        })
    }

    pub fn msr_config(&self, seed_override: Option<u64>) -> Result<MsrConfig, CliError> {
        let mut config = MsrConfig::new(
            self.required_uint("msr.r")?,
            self.required_uint("msr.l_h")?,
            self.required_uint("msr.l_m")?,
        );
        config.lambda_lr = self.float("msr.lambda_lr", config.lambda_lr);
        config.lambda_sto = self.float("msr.lambda_sto", config.lambda_sto);
        config.lambda_tv = self.float("msr.lambda_tv", config.lambda_tv);
        config.lambda_neg = self.float("msr.lambda_neg", config.lambda_neg);
        config.p = self.float("msr.p", config.p);
        config.q = self.float("msr.q", config.q);
        config.tau = self.float("msr.tau", config.tau);
        config.epsilon = self.float("msr.epsilon", config.epsilon);
        config.max_iters = self.uint("msr.max_iters", config.max_iters);
        config.rel_tol = self.float("msr.rel_tol", config.rel_tol);
        config.restarts = self.uint("msr.restarts", config.restarts);
        config.refine_iters = self.uint("msr.refine_iters", config.refine_iters);
        config.hops = self.uint("msr.hops", config.hops);
        if let Some(v) = self.get("msr.obj_tol") {
            config.obj_tol = Some(v.parse().expect("validated"));
        }
        if let Some(step) = self.get("msr.step") {
            config.step_rule = parse_step_rule(step)?;
        }
        config.seed = seed_override.unwrap_or(self.uint("msr.seed", 0) as u64);
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn hsr_config(&self, seed_override: Option<u64>) -> Result<HsrConfig, CliError> {
        let mut config = HsrConfig::default();
        config.lambda_inv = self.float("hsr.lambda_inv", config.lambda_inv);
        config.lambda_scale = self.float("hsr.lambda_scale", config.lambda_scale);
        config.batch = self.uint("hsr.batch", config.batch);
        config.t_max = self.uint("hsr.t_max", config.t_max);
        config.lr0 = self.float("hsr.lr0", config.lr0);
        config.d_lr_factor = self.float("hsr.d_lr_factor", config.d_lr_factor);
        config.instance_noise = self.float("hsr.instance_noise", config.instance_noise);
        config.beta1 = self.float("hsr.beta1", config.beta1);
        config.beta2 = self.float("hsr.beta2", config.beta2);
        config.seed = seed_override.unwrap_or(self.uint("hsr.seed", 0) as u64);
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn net_spec(&self, r: usize, s: usize) -> Result<NetSpec, CliError> {
        let b_h = self.uint("hsr.b_h", 8);
        let divisor = self.uint("hsr.width_divisor", 8);
        let spec = NetSpec::with_width_divisor(b_h, s, r, divisor);
        spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn pm_config(&self, k_m: usize, k_h: usize, omega: Vec<(usize, usize)>) -> Result<PmEstimatorConfig, CliError> {
        let mut config = PmEstimatorConfig::new(k_m, k_h, omega);
        config.max_iters = self.uint("pm.max_iters", config.max_iters);
        config.step = self.float("pm.step", config.step);
        config.rel_tol = self.float("pm.rel_tol", config.rel_tol);
        config.seed = self.uint("pm.seed", 0) as u64;
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn lambda_grid(&self) -> Result<LambdaGrid, CliError> {
        match self.get("msr.grid") {
            None => Ok(LambdaGrid::default_grid()),
            Some(text) => {
                // Three semicolon-separated comma lists: lr; sto; tv.
                let lists: Vec<&str> = text.split(';').collect();
                if lists.len() != 3 {
                    return Err(CliError::usage(
                        "msr.grid expects `lr,..;sto,..;tv,..`".to_string(),
                    ));
                }
                let parse = |s: &str| -> Result<Vec<f64>, CliError> {
                    s.split(',')
                        .map(|tok| {
                            tok.trim()
                                .parse()
                                .map_err(|_| CliError::usage(format!("bad grid value `{tok}`")))
                        })
                        .collect()
                };
                Ok(LambdaGrid {
                    lr: parse(lists[0])?,
                    sto: parse(lists[1])?,
                    tv: parse(lists[2])?,
                })
            }
        }
    }

    /// Scene extraction parameters for a source cube.
    pub fn scene_spec(&self, k_h_bands: usize) -> Result<SceneSpec, CliError> {
        let parse_window = |key: &str| -> Result<(usize, usize, usize, usize), CliError> {
            let text = self.required(key)?;
            let parts: Vec<usize> = text
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| CliError::usage(format!("{key}: expected four integers")))
                })
                .collect::<Result<_, _>>()?;
            if parts.len() != 4 {
                return Err(CliError::usage(format!(
                    "{key}: expected `row,col,rows,cols`"
                )));
            }
            Ok((parts[0], parts[1], parts[2], parts[3]))
        };
        let s = self.uint("scene.s", 4);
        let k_m = self.required_uint("scene.k_m")?;
        let kind = parse_spatial_kind(self.get("scene.kind").unwrap_or("gaussian:5,1.7"))?;
        let p = fresco_core::degrade::build_pm(k_h_bands, k_m)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let degradation =
            DegradationSpec::new(p, kind, s).map_err(|e| CliError::usage(e.to_string()))?;
        Ok(SceneSpec {
            msi_window: parse_window("scene.msi_window")?,
            hsi_window: parse_window("scene.hsi_window")?,
            hsi_shift_t: self.int("scene.shift", 0),
            hsi_rotation_deg: self.float("scene.rotation_deg", 0.0),
            degradation,
        })
    }
}

fn validate_kind(key: &str, value: &str, kind: Kind) -> Result<(), String> {
    let ok = match kind {
        Kind::UInt => value.parse::<usize>().is_ok(),
        Kind::Int => value.parse::<i64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok(),
        Kind::Text => !value.is_empty(),
        Kind::Flag => value == "true" || value == "false",
    };
    if ok {
        Ok(())
    } else {
        Err(format!(
            "key `{key}` expects a {} value, got `{value}`",
            match kind {
                Kind::UInt => "nonnegative integer",
                Kind::Int => "signed integer",
                Kind::Float => "floating-point",
                Kind::Text => "nonempty text",
                Kind::Flag => "true/false",
            }
        ))
    }
}

fn parse_step_rule(text: &str) -> Result<StepRule, CliError> {
    if let Some(rest) = text.strip_prefix("fixed:") {
        let eta: f64 = rest
            .parse()
            .map_err(|_| CliError::usage(format!("bad fixed step `{rest}`")))?;
        return Ok(StepRule::Fixed(eta));
    }
    if let Some(rest) = text.strip_prefix("backtracking:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() == 2 {
            let beta: f64 = parts[0]
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad backtracking beta `{}`", parts[0])))?;
            let c: f64 = parts[1]
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad backtracking constant `{}`", parts[1])))?;
            return Ok(StepRule::Backtracking { beta, c });
        }
    }
    Err(CliError::usage(format!(
        "msr.step expects `fixed:<eta>` or `backtracking:<beta>,<c>`, got `{text}`"
    )))
}

pub fn parse_spatial_kind(text: &str) -> Result<SpatialKind, CliError> {
    match text {
        "nearest" => Ok(SpatialKind::Nearest),
        "uniform" => Ok(SpatialKind::Uniform),
        other => {
            if let Some(rest) = other.strip_prefix("gaussian:") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() == 2 {
                    let size: usize = parts[0].trim().parse().map_err(|_| {
                        CliError::usage(format!("bad gaussian kernel size `{}`", parts[0]))
                    })?;
                    let sigma: f64 = parts[1].trim().parse().map_err(|_| {
                        CliError::usage(format!("bad gaussian sigma `{}`", parts[1]))
                    })?;
                    return Ok(SpatialKind::Gaussian { kernel_size: size, sigma });
                }
            }
            Err(CliError::usage(format!(
                "scene.kind expects `nearest`, `uniform` or `gaussian:<size>,<sigma>`, got `{other}`"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::parse("msr.r = 3\nbogus.key = 1\n", "test").unwrap_err();
        assert!(err.message.contains("test:2"), "{}", err.message);
        assert!(err.message.contains("unknown key"));
    }

    #[test]
    fn rejects_type_mismatch_with_line() {
        let err = RunConfig::parse("msr.r = not_a_number\n", "cfg").unwrap_err();
        assert!(err.message.contains("cfg:1"));
        assert!(err.message.contains("nonnegative integer"));
    }

    #[test]
    fn rejects_duplicates_and_syntax() {
        assert!(RunConfig::parse("msr.r = 1\nmsr.r = 2\n", "t").is_err());
        assert!(RunConfig::parse("just words\n", "t").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let config = RunConfig::parse("# comment\n\nmsr.r = 3 # trailing\n", "t").unwrap();
        assert_eq!(config.get("msr.r"), Some("3"));
    }

    #[test]
    fn every_config_struct_is_reachable() {
        let text = "\
synth.i_h = 12\nsynth.j_h = 12\nsynth.k_h = 8\nsynth.i_m = 24\nsynth.j_m = 24\nsynth.k_m = 3\n\
synth.l_h = 2\nsynth.l_m = 2\nsynth.r = 2\nsynth.seed = 1\n\
msr.r = 2\nmsr.l_h = 2\nmsr.l_m = 2\nmsr.lambda_lr = 0.001\nmsr.lambda_sto = 0.1\n\
msr.lambda_tv = 0\nmsr.lambda_neg = 1\nmsr.p = 0.5\nmsr.q = 0.5\nmsr.tau = 1\nmsr.epsilon = 0.001\n\
msr.max_iters = 50\nmsr.rel_tol = 1e-6\nmsr.step = backtracking:0.5,0.0001\nmsr.seed = 3\n\
msr.restarts = 2\nmsr.obj_tol = 1e-6\nmsr.refine_iters = 10\nmsr.hops = 1\n\
pm.estimate = true\npm.omega = banding\npm.max_iters = 100\npm.step = 1\npm.rel_tol = 1e-12\npm.seed = 0\n\
hsr.lambda_inv = 10\nhsr.lambda_scale = 15\nhsr.batch = 4\nhsr.t_max = 10\nhsr.lr0 = 0.001\n\
hsr.d_lr_factor = 0.2\nhsr.instance_noise = 0.1\nhsr.beta1 = 0.5\nhsr.beta2 = 0.999\nhsr.seed = 2\n\
hsr.b_h = 4\nhsr.width_divisor = 64\n\
eval.s = 4\neval.preview_bands = 0,1,2\n";
        let config = RunConfig::parse(text, "full").unwrap();
        let dims = config.scene_dims().unwrap();
        assert_eq!(dims.k_m, 3);
        let msr = config.msr_config(None).unwrap();
        assert_eq!(msr.seed, 3);
        assert_eq!(msr.restarts, 2);
        assert_eq!(msr.obj_tol, Some(1e-6));
        assert_eq!(msr.step_rule, StepRule::Backtracking { beta: 0.5, c: 1e-4 });
        let hsr = config.hsr_config(Some(9)).unwrap();
        assert_eq!(hsr.seed, 9);
        assert_eq!(hsr.batch, 4);
        let spec = config.net_spec(2, 4).unwrap();
        assert_eq!(spec.b_h, 4);
        assert_eq!(spec.translator_widths, vec![1, 2, 4, 8, 16]);
        let pm = config.pm_config(3, 8, vec![]).unwrap();
        assert_eq!(pm.max_iters, 100);
    }

    #[test]
    fn scene_spec_parses_windows() {
        let text = "\
scene.msi_window = 0,0,16,16\nscene.hsi_window = 4,4,8,8\nscene.shift = -2\n\
scene.rotation_deg = 30\nscene.kind = uniform\nscene.s = 4\nscene.k_m = 3\n";
        let config = RunConfig::parse(text, "scene").unwrap();
        let scene = config.scene_spec(10).unwrap();
        assert_eq!(scene.msi_window, (0, 0, 16, 16));
        assert_eq!(scene.hsi_shift_t, -2);
        assert_eq!(scene.degradation.s, 4);
        assert_eq!(scene.degradation.p.dim(), (3, 10));
    }

    #[test]
    fn step_rule_and_kind_errors() {
        assert!(parse_step_rule("nonsense").is_err());
        assert!(parse_spatial_kind("gaussian:oops").is_err());
        assert!(parse_spatial_kind("gaussian:5,1.7").is_ok());
    }
}
