//! Run configuration: a flat key=value file merged with command-line
//! overrides. Every key has a default, unknown keys are rejected, and
//! the fully resolved config is echoed beside the outputs so a run can
//! be reproduced from that file alone.

use fusenet::fusenet::{BranchSet, FuseNetConfig};
use fusenet::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub synthetic: bool,
    pub synthetic_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub k: usize,
    pub sample_budget: usize,
    pub gamma: f64,
    pub branches: String,
    pub epochs_l2: usize,
    pub lr_l2: f64,
    pub milestones_l2: Vec<usize>,
    pub epochs_fine: usize,
    pub lr_fine: f64,
    pub milestones_fine: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub viz: bool,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a synthetic 64x192 scene and a model small
    /// enough to train on one CPU core while exercising every code path.
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            seed: 0,
            synthetic: true,
            synthetic_frames: 8,
            height: 64,
            width: 192,
            channels: 16,
            blocks: 3,
            k: 9,
            sample_budget: 10_000,
            gamma: 1.0,
            branches: "s1,s2,cont".to_string(),
            epochs_l2: 100,
            lr_l2: 0.0016,
            milestones_l2: vec![65, 80, 85, 90],
            epochs_fine: 50,
            lr_fine: 0.00016,
            milestones_fine: vec![30],
            lr_decay: 0.1,
            batch_size: 1,
            crop_height: 0,
            crop_width: 0,
            viz: false,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| bad(key, v, "an integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| bad(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "a boolean (true/false)")),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let t = v.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(|p| parse_usize(key, p)).collect()
}

pub fn parse_branches(spec: &str) -> Result<BranchSet> {
    let mut set = BranchSet {
        s1: false,
        s2: false,
        cont: false,
    };
    for part in spec.split(',') {
        match part.trim() {
            "s1" => set.s1 = true,
            "s2" => set.s2 = true,
            "cont" => set.cont = true,
            "" => {}
            other => {
                return Err(Error::Config(format!(
                    "key `branches`: unknown branch `{other}` (expected s1, s2, cont)"
                )))
            }
        }
    }
    set.validate()?;
    Ok(set)
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => {
                self.checkpoint = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v, "an integer"))?,
            "synthetic" => self.synthetic = parse_bool(key, v)?,
            "synthetic_frames" => self.synthetic_frames = parse_usize(key, v)?,
            "height" => self.height = parse_usize(key, v)?,
            "width" => self.width = parse_usize(key, v)?,
            "channels" => self.channels = parse_usize(key, v)?,
            "blocks" => self.blocks = parse_usize(key, v)?,
            "k" => self.k = parse_usize(key, v)?,
            "sample_budget" => self.sample_budget = parse_usize(key, v)?,
            "gamma" => self.gamma = parse_f64(key, v)?,
            "branches" => {
                parse_branches(v)?;
                self.branches = v.to_string();
            }
            "epochs_l2" => self.epochs_l2 = parse_usize(key, v)?,
            "lr_l2" => self.lr_l2 = parse_f64(key, v)?,
            "milestones_l2" => self.milestones_l2 = parse_usize_list(key, v)?,
            "epochs_fine" => self.epochs_fine = parse_usize(key, v)?,
            "lr_fine" => self.lr_fine = parse_f64(key, v)?,
            "milestones_fine" => self.milestones_fine = parse_usize_list(key, v)?,
            "lr_decay" => self.lr_decay = parse_f64(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "crop_height" => self.crop_height = parse_usize(key, v)?,
            "crop_width" => self.crop_width = parse_usize(key, v)?,
            "viz" => self.viz = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Loads assignments from a flat key=value file. `#` starts a
    /// comment, blank lines are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Full-scale preset: the published operating point (C=64, N=12,
    /// 1216x352 crops) instead of the desk-scale defaults.
    pub fn apply_paper_scale(&mut self) {
        self.channels = 64;
        self.blocks = 12;
        self.height = 352;
        self.width = 1216;
        self.crop_height = 352;
        self.crop_width = 1216;
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.synthetic_frames == 0 && self.dataset.is_none() {
            return Err(Error::Config(
                "synthetic_frames must be at least 1 when no dataset is given".into(),
            ));
        }
        if (self.crop_height == 0) != (self.crop_width == 0) {
            return Err(Error::Config(
                "crop_height and crop_width must be set together (0 disables cropping)".into(),
            ));
        }
        // The network halves and restores resolution twice, so frame
        // extents entering it must be divisible by 4.
        for (name, v) in [
            ("height", self.height),
            ("width", self.width),
            ("crop_height", self.crop_height),
            ("crop_width", self.crop_width),
        ] {
            if v % 4 != 0 {
                return Err(Error::Config(format!("{name} = {v} must be divisible by 4")));
            }
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        for (name, lr) in [("lr_l2", self.lr_l2), ("lr_fine", self.lr_fine)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<FuseNetConfig> {
        let config = FuseNetConfig {
            channels: self.channels,
            blocks: self.blocks,
            k: self.k,
            sample_budget: self.sample_budget,
            gamma: self.gamma,
            branches: parse_branches(&self.branches)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn use_synthetic(&self) -> bool {
        self.synthetic || self.dataset.is_none()
    }

    fn path_str(p: &Option<PathBuf>) -> String {
        p.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    }

    fn list_str(v: &[usize]) -> String {
        v.iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Serializes the fully resolved config back into the file format
    /// `apply_file` reads, so the echo reproduces the run.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        let _ = writeln!(s, "dataset = {}", Self::path_str(&self.dataset));
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "checkpoint = {}", Self::path_str(&self.checkpoint));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "synthetic = {}", self.synthetic);
        let _ = writeln!(s, "synthetic_frames = {}", self.synthetic_frames);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "sample_budget = {}", self.sample_budget);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "branches = {}", self.branches);
        let _ = writeln!(s, "epochs_l2 = {}", self.epochs_l2);
        let _ = writeln!(s, "lr_l2 = {}", self.lr_l2);
        let _ = writeln!(s, "milestones_l2 = {}", Self::list_str(&self.milestones_l2));
        let _ = writeln!(s, "epochs_fine = {}", self.epochs_fine);
        let _ = writeln!(s, "lr_fine = {}", self.lr_fine);
        let _ = writeln!(
            s,
            "milestones_fine = {}",
            Self::list_str(&self.milestones_fine)
        );
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "crop_height = {}", self.crop_height);
        let _ = writeln!(s, "crop_width = {}", self.crop_width);
        let _ = writeln!(s, "viz = {}", self.viz);
        s
    }

    /// Writes the echo file into the output directory, creating it.
    pub fn echo(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        std::fs::write(&path, self.to_text())
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut a = RunConfig::default();
        a.set("channels", "24").unwrap();
        a.set("milestones_l2", "10,20").unwrap();
        a.set("dataset", "/tmp/kitti").unwrap();
        let text = a.to_text();
        let mut b = RunConfig::default();
        for line in text.lines().skip(1) {
            let (k, v) = line.split_once('=').unwrap();
            b.set(k.trim(), v).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("channles", "32").is_err());
    }

    #[test]
    fn branch_spec_parses() {
        let b = parse_branches("s1,cont").unwrap();
        assert!(b.s1 && !b.s2 && b.cont);
        assert!(parse_branches("s3").is_err());
        assert!(parse_branches("").is_err());
    }

    #[test]
    fn paper_scale_sets_operating_point() {
        let mut c = RunConfig::default();
        c.apply_paper_scale();
        assert_eq!((c.channels, c.blocks), (64, 12));
        assert_eq!((c.crop_width, c.crop_height), (1216, 352));
    }
}
