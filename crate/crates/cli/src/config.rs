//! Flat key-value benchmark configuration.
//!
//! One `key = value` per line, `#` starts a comment, lists are
//! comma-separated. Unknown keys are rejected so typos fail loudly.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config i/o error: {e}"),
            ConfigError::Parse { line, message } => {
                write!(f, "config line {line}: {message}")
            }
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Everything a benchmark run needs: plant parameters, horizon, initial
/// state scaling, the inner-iteration sweep, and solver tolerances.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_carts: usize,
    pub h: f64,
    pub m_mass: f64,
    pub k_s: f64,
    pub k_d: f64,
    pub x_bar: f64,
    pub u_bar: f64,
    pub horizon: usize,
    /// Initial state is `x0_scale` times the all-ones vector.
    pub x0_scale: f64,
    pub m_bar_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Contraction factor; `None` picks the midpoint of (rho, 1).
    pub beta: Option<f64>,
    /// Inner radius; `None` picks half the largest admissible radius.
    pub r: Option<f64>,
    /// Terminal scaling; `None` picks beta^N.
    pub alpha: Option<f64>,
    pub qp_tol: f64,
    pub ref_tol: f64,
    pub ref_max_iter: usize,
    pub t_max: usize,
    pub eps_stop: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_carts: 60,
            h: 0.1,
            m_mass: 1.0,
            k_s: 1.0,
            k_d: 1.0,
            x_bar: 2.5,
            u_bar: 1.0,
            horizon: 100,
            x0_scale: 2.0,
            m_bar_sweep: vec![1, 5, 10, 25, 50],
            seeds: vec![0],
            beta: None,
            r: None,
            alpha: None,
            qp_tol: 1e-10,
            ref_tol: 1e-8,
            ref_max_iter: 200_000,
            t_max: 1000,
            eps_stop: 1e-8,
        }
    }
}

fn parse_as<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Parse {
        line,
        message: format!("cannot parse value {value:?} for key {key:?}"),
    })
}

fn parse_list<T: std::str::FromStr>(
    value: &str,
    line: usize,
    key: &str,
) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(|part| parse_as(part, line, key))
        .collect()
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: lineno,
                    message: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let key = key.trim();
            match key {
                "n_carts" => cfg.n_carts = parse_as(value, lineno, key)?,
                "h" => cfg.h = parse_as(value, lineno, key)?,
                "m_mass" => cfg.m_mass = parse_as(value, lineno, key)?,
                "k_s" => cfg.k_s = parse_as(value, lineno, key)?,
                "k_d" => cfg.k_d = parse_as(value, lineno, key)?,
                "x_bar" => cfg.x_bar = parse_as(value, lineno, key)?,
                "u_bar" => cfg.u_bar = parse_as(value, lineno, key)?,
                "horizon" => cfg.horizon = parse_as(value, lineno, key)?,
                "x0_scale" => cfg.x0_scale = parse_as(value, lineno, key)?,
                "m_bar_sweep" => cfg.m_bar_sweep = parse_list(value, lineno, key)?,
                "seeds" => cfg.seeds = parse_list(value, lineno, key)?,
                "beta" => cfg.beta = Some(parse_as(value, lineno, key)?),
                "r" => cfg.r = Some(parse_as(value, lineno, key)?),
                "alpha" => cfg.alpha = Some(parse_as(value, lineno, key)?),
                "qp_tol" => cfg.qp_tol = parse_as(value, lineno, key)?,
                "ref_tol" => cfg.ref_tol = parse_as(value, lineno, key)?,
                "ref_max_iter" => cfg.ref_max_iter = parse_as(value, lineno, key)?,
                "t_max" => cfg.t_max = parse_as(value, lineno, key)?,
                "eps_stop" => cfg.eps_stop = parse_as(value, lineno, key)?,
                _ => {
                    return Err(ConfigError::Parse {
                        line: lineno,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("h", self.h),
            ("m_mass", self.m_mass),
            ("k_s", self.k_s),
            ("k_d", self.k_d),
            ("x_bar", self.x_bar),
            ("u_bar", self.u_bar),
            ("qp_tol", self.qp_tol),
            ("ref_tol", self.ref_tol),
            ("eps_stop", self.eps_stop),
        ];
        for (name, v) in positive {
            // NaN must fail too, hence the negated comparison
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.n_carts == 0 {
            return Err(ConfigError::Invalid("n_carts must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(ConfigError::Invalid("horizon must be at least 1".into()));
        }
        if self.t_max == 0 {
            return Err(ConfigError::Invalid("t_max must be at least 1".into()));
        }
        if self.m_bar_sweep.is_empty() || self.m_bar_sweep.contains(&0) {
            return Err(ConfigError::Invalid(
                "m_bar_sweep must be a non-empty list of positive integers".into(),
            ));
        }
        Ok(())
    }
}
