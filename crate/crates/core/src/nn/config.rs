use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::filters::{Dimensionality, FilterSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Residual CNN: stem + stride-2 blocks + global pool + linear head.
    #[default]
    SmallCnn,
    /// Patch embedding + per-token MLP blocks + mean pool + linear head.
    SeqMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batchnorm,
    /// Per-token standardization with affine (seq_mlp only).
    Layernorm,
    None,
}

/// What the inserted filter layer emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVariant {
    /// `h − detach(LPF(h))`.
    #[default]
    Edge,
    /// `detach(LPF(h))` in place of the edge filter (degradation control).
    Lowpass,
}

/// Trainable depthwise conv inserted where the edge filter would go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvReplacement {
    pub kernel_size: usize,
    pub position: usize,
}

pub const SMALL_CNN_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const SEQ_MLP_WIDTHS: [usize; 5] = [64, 64, 64, 64, 64];
pub const PATCH: usize = 4;

fn default_classes() -> usize {
    10
}

fn default_in_channels() -> usize {
    1
}

fn default_image_size() -> usize {
    28
}

fn single_filter<'de, D: Deserializer<'de>>(d: D) -> Result<Option<FilterSpec>, D::Error> {
    use serde::de::Error as _;
    // via toml::Value so a bad table reports its own error, not "no variant matched"
    let specs: Vec<FilterSpec> = match Option::<toml::Value>::deserialize(d)? {
        None => return Ok(None),
        Some(v @ toml::Value::Array(_)) => v.try_into().map_err(D::Error::custom)?,
        Some(v) => vec![v.try_into().map_err(D::Error::custom)?],
    };
    if specs.len() > 1 {
        return Err(D::Error::custom(format!(
            "{} filters declared; a model carries at most one edge filter",
            specs.len()
        )));
    }
    Ok(specs.into_iter().next())
}

/// Architecture description. `widths[0]` is the stem (or embedding) width,
/// the rest are per-block widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormKind>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default, deserialize_with = "single_filter", skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSpec>,
    #[serde(default)]
    pub filter_variant: FilterVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_replacement: Option<ConvReplacement>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::SmallCnn,
            widths: None,
            num_classes: default_classes(),
            norm: None,
            in_channels: default_in_channels(),
            image_size: default_image_size(),
            filter: None,
            filter_variant: FilterVariant::Edge,
            conv_replacement: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn small_cnn() -> Self {
        Self::default()
    }

    pub fn seq_mlp() -> Self {
        ModelConfig {
            arch: Arch::SeqMlp,
            ..Self::default()
        }
    }

    pub fn with_filter(mut self, spec: FilterSpec) -> Self {
        self.filter = Some(spec);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| match self.arch {
            Arch::SmallCnn => SMALL_CNN_WIDTHS.to_vec(),
            Arch::SeqMlp => SEQ_MLP_WIDTHS.to_vec(),
        })
    }

    pub fn norm(&self) -> NormKind {
        self.norm.unwrap_or(match self.arch {
            Arch::SmallCnn => NormKind::Batchnorm,
            Arch::SeqMlp => NormKind::Layernorm,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.widths().len().saturating_sub(1)
    }

    /// Copy with arch-dependent defaults written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.widths = Some(self.widths());
        c.norm = Some(self.norm());
        c
    }

    /// Padded side length fed to the patch embedding of `seq_mlp`.
    pub fn padded_image_size(&self) -> usize {
        self.image_size.next_power_of_two().max(PATCH)
    }

    /// Spatial side (small_cnn) or sequence length (seq_mlp) of the features
    /// leaving layer `position`.
    pub fn feature_extent(&self, position: usize) -> usize {
        match self.arch {
            Arch::SmallCnn => {
                let mut s = self.image_size;
                for _ in 0..position {
                    s = (s - 1) / 2 + 1;
                }
                s
            }
            Arch::SeqMlp => (self.padded_image_size() / PATCH).pow(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!(
                "model.widths needs a stem width and at least one block width, all ≥ 1; got {widths:?}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes must be ≥ 2"));
        }
        if self.in_channels == 0 || self.image_size < 2 {
            return Err(Error::config("model.in_channels / model.image_size out of range"));
        }
        match (self.arch, self.norm()) {
            (Arch::SmallCnn, NormKind::Layernorm) => {
                return Err(Error::config("model.norm: small_cnn supports batchnorm or none"))
            }
            (Arch::SeqMlp, NormKind::Batchnorm) => {
                return Err(Error::config("model.norm: seq_mlp supports layernorm or none"))
            }
            _ => {}
        }
        if self.filter.is_some() && self.conv_replacement.is_some() {
            return Err(Error::config(
                "model.filter and model.conv_replacement are mutually exclusive",
            ));
        }
        let blocks = self.num_blocks();
        if let Some(f) = &self.filter {
            f.validate()
                .map_err(|e| Error::config(format!("model.{}", strip_prefix(&e))))?;
            if f.position > blocks {
                return Err(Error::config(format!(
                    "model.filter.position {} out of range 0..={blocks}",
                    f.position
                )));
            }
            let want = match self.arch {
                Arch::SmallCnn => Dimensionality::TwoD,
                Arch::SeqMlp => Dimensionality::OneD,
            };
            if f.dimensionality != want {
                return Err(Error::config(format!(
                    "model.filter.dimensionality must be {want:?} for {:?}",
                    self.arch
                )));
            }
            let extent = self.feature_extent(f.position);
            if f.kernel_size / 2 >= extent && f.kernel_size > 1 {
                return Err(Error::config(format!(
                    "model.filter.kernel_size {} too large for {extent}-wide features at position {}",
                    f.kernel_size, f.position
                )));
            }
        }
        if let Some(c) = &self.conv_replacement {
            if self.arch != Arch::SmallCnn {
                return Err(Error::config("model.conv_replacement requires small_cnn"));
            }
            if c.kernel_size % 2 == 0 {
                return Err(Error::config("model.conv_replacement.kernel_size must be odd"));
            }
            if c.position > blocks {
                return Err(Error::config(format!(
                    "model.conv_replacement.position {} out of range 0..={blocks}",
                    c.position
                )));
            }
            if c.kernel_size / 2 >= self.feature_extent(c.position) && c.kernel_size > 1 {
                return Err(Error::config("model.conv_replacement.kernel_size too large for its position"));
            }
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::LpfKind;

    #[test]
    fn extents() {
        let c = ModelConfig::small_cnn();
        assert_eq!(
            (0..4).map(|p| c.feature_extent(p)).collect::<Vec<_>>(),
            vec![28, 14, 7, 4]
        );
        assert_eq!(ModelConfig::seq_mlp().feature_extent(2), 64);
    }

    #[test]
    fn position_out_of_range_names_field() {
        let c = ModelConfig::small_cnn().with_filter(FilterSpec::mean_2d(3).at(4));
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("filter.position"), "{msg}");
    }

    #[test]
    fn exclusive_insertions() {
        let mut c = ModelConfig::small_cnn().with_filter(FilterSpec::mean_2d(3).at(1));
        c.conv_replacement = Some(ConvReplacement { kernel_size: 3, position: 1 });
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_must_fit() {
        let c = ModelConfig::small_cnn().with_filter(FilterSpec::mean_2d(9).at(3));
        assert!(c.validate().is_err());
        let c = ModelConfig::small_cnn().with_filter(FilterSpec::mean_2d(7).at(3));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn wrong_dimensionality() {
        let c = ModelConfig::seq_mlp().with_filter(FilterSpec::mean_2d(3).at(1));
        assert!(c.validate().is_err());
        let ok = ModelConfig::seq_mlp()
            .with_filter(FilterSpec::new(LpfKind::Mean, Dimensionality::OneD, 3).at(1));
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn two_filters_rejected_by_parser() {
        let src = r#"
            [[filter]]
            lpf_kind = "mean"
            dimensionality = "two_d"
            kernel_size = 3
            position = 1
            [[filter]]
            lpf_kind = "mean"
            dimensionality = "two_d"
            kernel_size = 5
            position = 2
        "#;
        let err = toml::from_str::<ModelConfig>(src).unwrap_err().to_string();
        assert!(err.contains("at most one edge filter"), "{err}");

        let one = r#"
            [filter]
            lpf_kind = "gaussian"
            dimensionality = "two_d"
            kernel_size = 5
            position = 2
        "#;
        let c: ModelConfig = toml::from_str(one).unwrap();
        assert_eq!(c.filter.unwrap().sigma, 1.0);
    }
}
