use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Patching, SINR attention, transformer backbone, two-layer head.
    PatchNet,
    Rnn,
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    TinyTransformer,
    Identity,
    /// No backbone stage; computes the same function as `Identity`.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezePolicy {
    LnOnly,
    AllParams,
    Frozen,
    LnMlp,
}

macro_rules! string_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(ModelKind, "model kind", ModelKind::PatchNet => "patchnet", ModelKind::Rnn => "rnn", ModelKind::Lstm => "lstm", ModelKind::Gru => "gru");
string_enum!(BackboneKind, "backbone", BackboneKind::TinyTransformer => "tiny-transformer", BackboneKind::Identity => "identity", BackboneKind::None => "none");
string_enum!(FreezePolicy, "freeze policy", FreezePolicy::LnOnly => "ln-only", FreezePolicy::AllParams => "all-params", FreezePolicy::Frozen => "frozen", FreezePolicy::LnMlp => "ln+mlp");

impl FreezePolicy {
    /// Whether a backbone parameter (name relative to a block) stays trainable.
    pub fn trains(&self, name: &str) -> bool {
        let ln = name.contains(".ln1.") || name.contains(".ln2.");
        match self {
            FreezePolicy::LnOnly => ln,
            FreezePolicy::AllParams => true,
            FreezePolicy::Frozen => false,
            FreezePolicy::LnMlp => ln || name.contains(".mlp."),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Patch size `N`.
    pub patch: usize,
    /// SINR-attention iterations `N_SA`.
    pub sa_iterations: usize,
    pub se_reduction: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Backbone depth.
    pub layers: usize,
    pub ff_width: usize,
    pub backbone: BackboneKind,
    pub freeze: FreezePolicy,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::PatchNet,
            patch: 4,
            sa_iterations: 4,
            se_reduction: 2,
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_width: 256,
            backbone: BackboneKind::TinyTransformer,
            freeze: FreezePolicy::LnOnly,
            rnn_hidden: 128,
            rnn_layers: 4,
        }
    }
}

impl ModelConfig {
    pub fn recurrent(kind: ModelKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("se_reduction", self.se_reduction),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("rnn_hidden", self.rnn_hidden),
            ("rnn_layers", self.rnn_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.kind == ModelKind::PatchNet && self.backbone == BackboneKind::TinyTransformer && !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    /// Whether the transformer stack is actually built.
    pub fn has_backbone(&self) -> bool {
        self.backbone == BackboneKind::TinyTransformer && self.layers > 0
    }

    pub fn to_metadata(&self) -> Vec<(String, String)> {
        [
            ("model.kind", self.kind.to_string()),
            ("model.patch", self.patch.to_string()),
            ("model.sa_iterations", self.sa_iterations.to_string()),
            ("model.se_reduction", self.se_reduction.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.layers", self.layers.to_string()),
            ("model.ff_width", self.ff_width.to_string()),
            ("model.backbone", self.backbone.to_string()),
            ("model.freeze", self.freeze.to_string()),
            ("model.rnn_hidden", self.rnn_hidden.to_string()),
            ("model.rnn_layers", self.rnn_layers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_metadata(meta: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Config(format!("checkpoint metadata `{key}` is not an integer")))
        };
        let cfg = Self {
            kind: get("model.kind")?.parse()?,
            patch: num("model.patch")?,
            sa_iterations: num("model.sa_iterations")?,
            se_reduction: num("model.se_reduction")?,
            d_model: num("model.d_model")?,
            heads: num("model.heads")?,
            layers: num("model.layers")?,
            ff_width: num("model.ff_width")?,
            backbone: get("model.backbone")?.parse()?,
            freeze: get("model.freeze")?.parse()?,
            rnn_hidden: num("model.rnn_hidden")?,
            rnn_layers: num("model.rnn_layers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in [FreezePolicy::LnOnly, FreezePolicy::AllParams, FreezePolicy::Frozen, FreezePolicy::LnMlp] {
            assert_eq!(p.to_string().parse::<FreezePolicy>().unwrap(), p);
        }
        assert!("bert".parse::<BackboneKind>().is_err());
        let cfg = ModelConfig { kind: ModelKind::Gru, layers: 3, ..Default::default() };
        assert_eq!(ModelConfig::from_metadata(&cfg.to_metadata()).unwrap(), cfg);
    }

    #[test]
    fn freeze_rules() {
        assert!(FreezePolicy::LnOnly.trains("backbone.0.ln2.gain"));
        assert!(!FreezePolicy::LnOnly.trains("backbone.0.mlp.fc1.weight"));
        assert!(FreezePolicy::LnMlp.trains("backbone.1.mlp.fc2.bias"));
        assert!(!FreezePolicy::LnMlp.trains("backbone.1.attn.query.weight"));
        assert!(!FreezePolicy::Frozen.trains("backbone.0.ln1.bias"));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig { d_model: 10, heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
