use super::config::{ModelConfig, Variant};
use super::network::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// `p ∈ {2, 4}` × `d_k ∈ {16, 32, 64}`.
    PatchDim,
    /// `l = 1..=6`.
    Depth,
    /// The five module combinations.
    Ablation,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch_dim" => Ok(Self::PatchDim),
            "depth" => Ok(Self::Depth),
            "ablation" => Ok(Self::Ablation),
            other => Err(Error::InvalidConfig(format!("unknown grid `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::PatchDim => "patch_dim",
            GridKind::Depth => "depth",
            GridKind::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub label: String,
    pub config: ModelConfig,
}

/// Configs of one experiment grid, in report order. `base` supplies
/// everything the grid does not vary (seed, head convention, ...).
pub fn sweep_grid(kind: GridKind, base: &ModelConfig) -> Vec<GridEntry> {
    match kind {
        GridKind::PatchDim => {
            let mut out = Vec::new();
            for p in [2, 4] {
                for d in [16, 32, 64] {
                    let mut config = base.clone();
                    config.variant = Variant::Full;
                    config.attention.patch_size = p;
                    config.attention.model_dim = d;
                    out.push(GridEntry {
                        label: format!("p={p} d_k={d}"),
                        config,
                    });
                }
            }
            out
        }
        GridKind::Depth => (1..=6)
            .map(|l| {
                let mut config = base.clone();
                config.variant = Variant::Full;
                config.attention.layers = l;
                GridEntry {
                    label: format!("l={l}"),
                    config,
                }
            })
            .collect(),
        GridKind::Ablation => Variant::ALL
            .into_iter()
            .map(|v| {
                let mut config = ModelConfig::for_variant(v);
                config.seed = base.seed;
                config.attention.head_convention = base.attention.head_convention;
                config.dropout = base.dropout;
                config.input = base.input;
                config.classes = base.classes;
                GridEntry {
                    label: v.title().to_string(),
                    config,
                }
            })
            .collect(),
    }
}

/// `(total, trainable)` parameter counts of the model `config` builds.
pub fn count_params(config: &ModelConfig) -> Result<(usize, usize)> {
    Ok(Model::<f32>::build(config)?.param_count())
}
