//! Training configuration: every tunable of the pipeline in one flat,
//! validated record.
//!
//! The on-disk format is UTF-8 `key = value` lines. `#` starts a comment,
//! lists are comma separated and booleans are `true` / `false`. Keys match
//! the struct field names; command-line overrides use the same names
//! (hyphens and underscores are interchangeable there).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse(key: &str, raw: &str) -> Result<Self>;
    fn render(&self) -> String;
}

fn parse_err(key: &str, raw: &str, reason: impl ToString) -> Error {
    Error::Parse {
        key: key.to_string(),
        value: raw.to_string(),
        reason: reason.to_string(),
    }
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(key: &str, raw: &str) -> Result<Self> {
                raw.parse::<$t>().map_err(|e| parse_err(key, raw, e))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(u8, usize, u64, f64, bool);

impl ConfigValue for Vec<f64> {
    fn parse(key: &str, raw: &str) -> Result<Self> {
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(key, raw, e)))
            .collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! train_config {
    ($( $(#[$m:meta])* $name:ident : $ty:ty = $default:expr, )*) => {
        /// Resolved training configuration.
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $( $(#[$m])* pub $name: $ty, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl TrainConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[ $( stringify!($name), )* ];

            /// Sets one field from its textual form. Does not validate.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                let key = normalize_key(key);
                match key.as_str() {
                    $( stringify!($name) => self.$name = <$ty as ConfigValue>::parse(&key, raw.trim())?, )*
                    _ => return Err(Error::UnknownKey(key)),
                }
                Ok(())
            }

            /// `(key, rendered value)` pairs in file order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($name), self.$name.render()), )* ]
            }
        }
    };
}

train_config! {
    /// Number of semantic classes C (class 0 is background).
    num_classes: usize = 6,
    /// Reserved label id excluded from every loss and metric.
    ignore_id: u8 = 255,
    image_height: usize = 64,
    image_width: usize = 64,
    /// Encoder output width D.
    feature_dim: usize = 16,
    /// Encoder downsampling factor; a power of two up to 16.
    feature_stride: usize = 4,
    /// Weight of the mirrored (teacher-augmented to student-clean) distillation term.
    alpha: f64 = 0.5,
    lambda_seg: f64 = 1.0,
    lambda_distil_warmup: f64 = 0.5,
    lambda_distil_st: f64 = 0.25,
    /// Teacher EMA momentum.
    ema_momentum: f64 = 0.999,
    /// Centroid EMA momentum.
    centroid_momentum: f64 = 0.999,
    learning_rate: f64 = 2.5e-4,
    sgd_momentum: f64 = 0.0,
    weight_decay: f64 = 0.0,
    batch_source: usize = 2,
    batch_target: usize = 2,
    warmup_epochs: usize = 20,
    st_epochs: usize = 30,
    /// Pseudo-label refresh period R during self-training, in epochs.
    label_refresh_epochs: usize = 10,
    mst_scales: Vec<f64> = vec![0.75, 1.0, 1.25],
    seed: u64 = 0,

    /// Warm-up ablation switches.
    photometric_augment: bool = true,
    symmetric_distil: bool = true,
    use_crdomix: bool = true,

    /// Photometric augmentation amplitudes.
    jitter_brightness: f64 = 0.3,
    jitter_contrast: f64 = 0.3,
    jitter_saturation: f64 = 0.5,
    jitter_hue: f64 = 0.5,
    grayscale_prob: f64 = 0.2,
    blur_prob: f64 = 0.3,

    /// Regenerate stored warm labels with the teacher instead of the student.
    refresh_with_teacher: bool = false,
    /// Evaluate the teacher instead of the student.
    eval_with_teacher: bool = false,

    /// Synthetic benchmark sizes.
    n_source: usize = 400,
    n_target_train: usize = 400,
    n_target_val: usize = 100,
    n_target2_val: usize = 100,
    /// Probability that a source sample receives hard-to-see long-tail labels.
    longtail_rate: f64 = 0.3,
    /// Class id painted by long-tail injection.
    longtail_class: u8 = 5,
}

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

impl TrainConfig {
    /// Checks every invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if !(2..=255).contains(&c) {
            return Err(Error::validation("num_classes", format!("must be in [2, 255], got {c}")));
        }
        if (self.ignore_id as usize) < c {
            return Err(Error::validation(
                "ignore_id",
                format!("must lie outside [0, {c}), got {}", self.ignore_id),
            ));
        }
        let s = self.feature_stride;
        if !s.is_power_of_two() || s > 16 {
            return Err(Error::validation(
                "feature_stride",
                format!("must be a power of two in [1, 16], got {s}"),
            ));
        }
        for (field, v) in [("image_height", self.image_height), ("image_width", self.image_width)] {
            if v == 0 || v % s != 0 {
                return Err(Error::validation(
                    field,
                    format!("must be a positive multiple of feature_stride {s}, got {v}"),
                ));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        for (field, v) in [
            ("ema_momentum", self.ema_momentum),
            ("centroid_momentum", self.centroid_momentum),
            ("sgd_momentum", self.sgd_momentum),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("longtail_rate", self.longtail_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        for (field, v) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_distil_warmup", self.lambda_distil_warmup),
            ("lambda_distil_st", self.lambda_distil_st),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_source == 0 {
            return Err(Error::validation("batch_source", "must be at least 1"));
        }
        if self.batch_target == 0 {
            return Err(Error::validation("batch_target", "must be at least 1"));
        }
        if self.label_refresh_epochs == 0 {
            return Err(Error::validation("label_refresh_epochs", "must be at least 1"));
        }
        if self.mst_scales.is_empty() || self.mst_scales.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation("mst_scales", "must be a non-empty list of positive scales"));
        }
        if self.longtail_class as usize >= c {
            return Err(Error::validation(
                "longtail_class",
                format!("must be a class id below {c}, got {}", self.longtail_class),
            ));
        }
        if self.n_source == 0 {
            return Err(Error::validation("n_source", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_overrides<'a>(
        mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(self)
    }

    /// Parses config text on top of the defaults (no validation).
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                key: format!("line {}", lineno + 1),
                value: line.to_string(),
                reason: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Renders the config in the file format; `parse_str` reads it back
    /// to an equal value.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# resolved training configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.image_height / self.feature_stride,
            self.image_width / self.feature_stride,
        )
    }
}

/// Reads a config file, applies `overrides` after the file values and
/// validates the result.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = TrainConfig::parse_str(&text)?
        .with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn file_values_are_read() {
        let f = write_tmp("alpha = 0.5\nema_momentum = 0.999 # teacher\n");
        let cfg = load_config(f.path(), &[]).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.ema_momentum, 0.999);
        assert_eq!(cfg.centroid_momentum, 0.999);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = write_tmp("");
        let cfg = load_config(f.path(), &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.num_classes, 6);
        assert_eq!(cfg.ignore_id, 255);
        assert_eq!(cfg.lambda_seg, 1.0);
        assert_eq!(cfg.lambda_distil_warmup, 0.5);
        assert_eq!(cfg.lambda_distil_st, 0.25);
        assert_eq!(cfg.mst_scales, vec![0.75, 1.0, 1.25]);
        assert_eq!(cfg.label_refresh_epochs, 10);
    }

    #[test]
    fn override_out_of_bounds_alpha_is_rejected() {
        let f = write_tmp("");
        let err = load_config(f.path(), &[("alpha".into(), "1.5".into())]).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_win_over_file() {
        let f = write_tmp("alpha = 0.3\n");
        let cfg = load_config(f.path(), &[("--alpha".into(), "0.7".into())]).unwrap();
        assert_eq!(cfg.alpha, 0.7);
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write_tmp("colour = red\n");
        match load_config(f.path(), &[]).unwrap_err() {
            Error::UnknownKey(k) => assert_eq!(k, "colour"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations() {
        let bad = |k: &str, v: &str| {
            TrainConfig::default()
                .with_overrides([(k, v)])
                .unwrap()
                .validate()
                .unwrap_err()
        };
        assert!(matches!(bad("ignore_id", "3"), Error::Validation { field: "ignore_id", .. }));
        assert!(matches!(bad("image_height", "30"), Error::Validation { field: "image_height", .. }));
        assert!(matches!(bad("ema_momentum", "1.01"), Error::Validation { field: "ema_momentum", .. }));
        assert!(matches!(bad("lambda_seg", "-1"), Error::Validation { field: "lambda_seg", .. }));
        assert!(matches!(bad("mst_scales", ""), Error::Validation { field: "mst_scales", .. }));
    }

    #[test]
    fn schema_has_no_confidence_threshold() {
        for k in TrainConfig::KEYS {
            assert!(!k.contains("threshold") && !k.contains("confidence"), "{k}");
        }
    }

    #[test]
    fn deterministic_load() {
        let f = write_tmp("alpha = 0.25\nmst_scales = 0.5, 1.0\n");
        let o = vec![("seed".to_string(), "9".to_string())];
        assert_eq!(load_config(f.path(), &o).unwrap(), load_config(f.path(), &o).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip(alpha in 0.001f64..0.999, xi in 0.0f64..=1.0, lr in 0.0f64..1.0,
                      seed in any::<u64>(), scales in prop::collection::vec(0.1f64..3.0, 1..5)) {
            let mut cfg = TrainConfig::default();
            cfg.alpha = alpha;
            cfg.ema_momentum = xi;
            cfg.learning_rate = lr;
            cfg.seed = seed;
            cfg.mst_scales = scales;
            let back = TrainConfig::parse_str(&cfg.to_file_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
