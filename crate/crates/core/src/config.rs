//! Flat `key = value` configuration.
//!
//! Every key has a paper-scale default and a desk-scale preset. A file may
//! set `profile = desk` or `profile = paper` (default `paper`) to choose the
//! base, then override individual keys. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("expected an unsigned integer, got {s:?} ({e})"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("expected an unsigned integer, got {s:?} ({e})"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("expected a number, got {s:?} ({e})"))?;
        if !v.is_finite() {
            return Err(format!("expected a finite number, got {s:?}"));
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! config_keys {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $paper:expr, $desk:expr; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            pub profile: Profile,
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Config {
            /// Paper-scale defaults.
            pub fn paper() -> Self {
                Self { profile: Profile::Paper, $( $field: $paper.into(), )* }
            }

            /// Desk-scale preset: same architecture, smaller dimensions.
            pub fn desk() -> Self {
                Self { profile: Profile::Desk, $( $field: $desk.into(), )* }
            }

            pub const KEYS: &'static [&'static str] = &[ $( stringify!($field), )* ];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($field) => self.$field = <$ty as ConfigValue>::parse_value(value)?, )*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// Every key with its rendered value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($field), ConfigValue::render(&self.$field)), )* ]
            }
        }
    };
}

config_keys! {
    /// Neighbor agents fed to the encoder (nearest first).
    num_neighbors: usize = 32usize, 8usize;
    /// History length T, including the current step, at 10 Hz.
    num_past_steps: usize = 21usize, 21usize;
    neighbor_dim: usize = 11usize, 11usize;
    num_lanes: usize = 70usize, 10usize;
    points_per_polyline: usize = 20usize, 20usize;
    lane_dim: usize = 12usize, 12usize;
    /// Route lanes fed to the navigation embedding.
    num_nav_lanes: usize = 5usize, 2usize;
    num_statics: usize = 16usize, 4usize;
    encoder_blocks: usize = 3usize, 2usize;
    encoder_hidden: usize = 192usize, 64usize;
    decoder_blocks: usize = 4usize, 2usize;
    decoder_hidden: usize = 256usize, 64usize;
    num_heads: usize = 8usize, 4usize;
    /// FFN width as a multiple of the decoder hidden size.
    ffn_ratio: usize = 4usize, 2usize;
    traj_len: usize = 80usize, 80usize;
    seg_len: usize = 20usize, 20usize;
    seg_overlap: usize = 10usize, 10usize;
    flow_path: String = "conditional_ot", "conditional_ot";
    /// Scale applied to the initial Gaussian noise when sampling.
    temperature: f64 = 1.0, 1.0;
    ode_steps: usize = 4usize, 4usize;
    guidance_scale: f64 = 1.8, 1.8;
    mask_prob: f64 = 0.1, 0.1;
    t_clamp: f64 = 1e-3, 1e-3;
    consistency_weight: f64 = 0.1, 0.1;
    lr: f64 = 5e-4, 5e-4;
    beta1: f64 = 0.9, 0.9;
    beta2: f64 = 0.999, 0.999;
    adam_eps: f64 = 1e-8, 1e-8;
    weight_decay: f64 = 1e-4, 1e-4;
    ema_decay: f64 = 0.999, 0.999;
    batch_size: usize = 2048usize, 64usize;
    seed: u64 = 0u64, 0u64;
    augment: bool = true, true;
    /// Probability that a training sample is perturbed.
    augment_prob: f64 = 0.5, 0.5;
    perturb_x: f64 = 1.0, 1.0;
    perturb_y: f64 = 0.5, 0.5;
    perturb_heading: f64 = 0.1, 0.1;
    perturb_speed: f64 = 1.0, 1.0;
    episode_seconds: f64 = 8.0, 8.0;
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

/// Keys that fix parameter shapes or the input layout a model was trained on.
const ARCH_KEYS: &[&str] = &[
    "num_neighbors",
    "num_past_steps",
    "neighbor_dim",
    "num_lanes",
    "points_per_polyline",
    "lane_dim",
    "num_nav_lanes",
    "num_statics",
    "encoder_blocks",
    "encoder_hidden",
    "decoder_blocks",
    "decoder_hidden",
    "num_heads",
    "ffn_ratio",
    "traj_len",
    "seg_len",
    "seg_overlap",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected key = value, got {line:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config { line: line_no, msg: "empty key".into() });
            }
            if pairs.iter().any(|(_, k, _)| *k == key) {
                return Err(Error::Config { line: line_no, msg: format!("duplicate key {key:?}") });
            }
            pairs.push((line_no, key, value));
        }

        let mut cfg = match pairs.iter().find(|(_, k, _)| *k == "profile") {
            None => Config::paper(),
            Some((_, _, "paper")) => Config::paper(),
            Some((_, _, "desk")) => Config::desk(),
            Some((line, _, v)) => {
                return Err(Error::Config { line: *line, msg: format!("unknown profile {v:?}") });
            }
        };
        for (line, key, value) in pairs {
            if key == "profile" {
                continue;
            }
            cfg.set(key, value).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!("profile = {}\n", self.profile.name());
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.neighbor_dim != crate::scenario::NEIGHBOR_DIM {
            return bad(format!("neighbor_dim must be {}", crate::scenario::NEIGHBOR_DIM));
        }
        if self.lane_dim != crate::scenario::LANE_DIM {
            return bad(format!("lane_dim must be {}", crate::scenario::LANE_DIM));
        }
        if self.flow_path != "conditional_ot" {
            return bad(format!("unsupported flow_path {:?}", self.flow_path));
        }
        let positive = [
            ("num_neighbors", self.num_neighbors),
            ("num_lanes", self.num_lanes),
            ("num_past_steps", self.num_past_steps),
            ("points_per_polyline", self.points_per_polyline),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("num_heads", self.num_heads),
            ("ffn_ratio", self.ffn_ratio),
            ("traj_len", self.traj_len),
            ("seg_len", self.seg_len),
            ("ode_steps", self.ode_steps),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be at least 1"));
            }
        }
        if self.traj_len < 2 {
            return bad("traj_len must be at least 2".into());
        }
        if self.decoder_hidden % self.num_heads != 0 {
            return bad(format!("decoder_hidden {} is not divisible by num_heads {}", self.decoder_hidden, self.num_heads));
        }
        if self.decoder_hidden % 2 != 0 {
            return bad("decoder_hidden must be even for the sinusoidal embeddings".into());
        }
        crate::tokenizer::SegmentLayout::new(self.traj_len, self.seg_len, self.seg_overlap)?;
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad(format!("augment_prob must lie in [0, 1], got {}", self.augment_prob));
        }
        if self.guidance_scale < 0.0 {
            return bad("guidance_scale must be non-negative".into());
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 1.0) {
            return bad("t_clamp must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]".into());
        }
        if self.lr <= 0.0 || self.temperature < 0.0 || self.episode_seconds <= 0.0 {
            return bad("lr and episode_seconds must be positive, temperature non-negative".into());
        }
        for (k, v) in [
            ("perturb_x", self.perturb_x),
            ("perturb_y", self.perturb_y),
            ("perturb_heading", self.perturb_heading),
            ("perturb_speed", self.perturb_speed),
            ("consistency_weight", self.consistency_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 {
                return bad(format!("{k} must be non-negative"));
            }
        }
        Ok(())
    }

    fn arch_entries(&self) -> Vec<(&'static str, String)> {
        self.entries().into_iter().filter(|(k, _)| ARCH_KEYS.contains(k)).collect()
    }

    /// FNV-1a over the architecture keys and values.
    pub fn arch_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.arch_entries() {
            for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n'].into_iter()) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Human-readable list of architecture keys that differ, `key: a -> b`.
    pub fn arch_diff(&self, other: &Config) -> String {
        let mut out = String::new();
        for ((k, a), (_, b)) in self.arch_entries().into_iter().zip(other.arch_entries()) {
            if a != b {
                let _ = writeln!(out, "  {k}: {a} -> {b}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_match_hyperparameter_table() {
        let c = Config::paper();
        assert_eq!(
            (c.num_neighbors, c.num_past_steps, c.neighbor_dim, c.num_lanes, c.points_per_polyline, c.lane_dim),
            (32, 21, 11, 70, 20, 12)
        );
        assert_eq!((c.encoder_blocks, c.decoder_blocks, c.encoder_hidden, c.decoder_hidden), (3, 4, 192, 256));
        assert_eq!((c.num_heads, c.seg_len, c.seg_overlap, c.ode_steps), (8, 20, 10, 4));
        assert_eq!((c.lr, c.ema_decay, c.temperature), (5e-4, 0.999, 1.0));
    }

    #[test]
    fn profile_then_overrides() {
        let c = Config::parse("# comment\nprofile = desk\nbatch_size = 16  # trailing\n\nlr = 1e-3\n").unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.decoder_hidden, 64);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert!(matches!(Config::parse("bogus = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(Config::parse("lr = 1\nlr = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(Config::parse("lr 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(Config::parse("profile = huge"), Err(Error::Config { .. })));
        assert!(matches!(Config::parse("lr = nan"), Err(Error::Config { .. })));
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(Config::parse("seg_len = 20\nseg_overlap = 7").is_err());
        assert!(Config::parse("neighbor_dim = 10").is_err());
        assert!(Config::parse("decoder_hidden = 250").is_err());
        assert!(Config::parse("mask_prob = 1.0").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::desk();
        c.lr = 0.000123;
        c.seed = 42;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn arch_hash_tracks_shapes_only() {
        let a = Config::desk();
        let mut b = a.clone();
        b.lr = 1.0;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.decoder_hidden = 128;
        assert_ne!(a.arch_hash(), b.arch_hash());
        assert!(a.arch_diff(&b).contains("decoder_hidden: 64 -> 128"));
    }
}
