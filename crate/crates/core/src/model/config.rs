use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{AttentionScale, AttentionSpec, ConvLayerSpec, EncoderSpec, HeadConvention};

/// Which blocks sit between the input image and the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Encoder → decoder → attention → head.
    Full,
    EncoderOnly,
    EncoderDecoder,
    /// Attention directly on the (padded) raw image.
    AttentionOnly,
    EncoderAttention,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EncoderOnly,
        Variant::EncoderDecoder,
        Variant::AttentionOnly,
        Variant::EncoderAttention,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EncoderOnly => "encoder_only",
            Variant::EncoderDecoder => "encoder_decoder",
            Variant::AttentionOnly => "attention_only",
            Variant::EncoderAttention => "encoder_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }

    /// Human-readable row label used in reports.
    pub fn title(self) -> &'static str {
        match self {
            Variant::Full => "Convolutional Encoder-Decoder + Attention Module",
            Variant::EncoderOnly => "Convolutional Encoder",
            Variant::EncoderDecoder => "Convolutional Encoder-Decoder",
            Variant::AttentionOnly => "Attention Module",
            Variant::EncoderAttention => "Convolutional Encoder + Attention Module",
        }
    }

    pub fn has_encoder(self) -> bool {
        !matches!(self, Variant::AttentionOnly)
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::Full | Variant::EncoderDecoder)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::AttentionOnly | Variant::EncoderAttention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `[H, W, C]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub encoder: EncoderSpec,
    pub decoder_filters: usize,
    pub attention: AttentionSpec,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Full)
    }
}

impl ModelConfig {
    /// Reference configuration of each variant: `p=36` for attention on the
    /// raw image, `p=1` for attention on the encoder output, `p=4` otherwise.
    pub fn for_variant(variant: Variant) -> Self {
        let patch_size = match variant {
            Variant::AttentionOnly => 36,
            Variant::EncoderAttention => 1,
            _ => 4,
        };
        Self {
            variant,
            input: [180, 60, 3],
            classes: 14,
            encoder: EncoderSpec::default(),
            decoder_filters: 64,
            attention: AttentionSpec {
                patch_size,
                ..AttentionSpec::default()
            },
            head_widths: vec![1024, 512],
            dropout: 0.5,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::InvalidConfig(format!("input extents must be positive: {:?}", self.input)));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.variant.has_encoder() {
            self.encoder.validate()?;
        }
        if self.variant.has_decoder() && self.decoder_filters == 0 {
            return Err(Error::InvalidConfig("decoder_filters must be positive".into()));
        }
        if self.variant.has_attention() {
            self.attention.validate()?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Serializes to the `key = value` text format read by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let a = &self.attention;
        let mut s = String::new();
        let [h, w, c] = self.input;
        let encoder: Vec<String> = self
            .encoder
            .layers
            .iter()
            .map(|l| format!("{}x{}", l.kernel, l.filters))
            .collect();
        let widths: Vec<String> = self.head_widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "input = {h}x{w}x{c}");
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "encoder = {}", encoder.join(","));
        let _ = writeln!(s, "decoder_filters = {}", self.decoder_filters);
        let _ = writeln!(s, "patch_size = {}", a.patch_size);
        let _ = writeln!(s, "model_dim = {}", a.model_dim);
        let _ = writeln!(s, "heads = {}", a.heads);
        let _ = writeln!(s, "layers = {}", a.layers);
        let _ = writeln!(s, "mlp_hidden = {}", a.mlp_hidden);
        let _ = writeln!(s, "head_convention = {}", a.head_convention.as_str());
        let _ = writeln!(s, "attention_scale = {}", a.scale.as_str());
        let _ = writeln!(s, "projection_bias = {}", a.projection_bias);
        let _ = writeln!(s, "second_residual = {}", a.second_residual);
        let _ = writeln!(s, "final_norm = {}", a.final_norm);
        let _ = writeln!(s, "head_widths = {}", widths.join(","));
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored.
    /// Keys not given keep the defaults of the chosen variant.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate key `{k}`")));
            }
        }
        let variant = match pairs.remove("variant") {
            Some(v) => Variant::parse(&v)?,
            None => Variant::Full,
        };
        let mut cfg = Self::for_variant(variant);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.attention;
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "input" => {
                let v = parse_dims(key, value, 'x')?;
                self.input = v
                    .try_into()
                    .map_err(|_| Error::InvalidConfig(format!("`input` needs HxWxC, got `{value}`")))?;
            }
            "classes" => self.classes = parse_num(key, value)?,
            "encoder" => {
                let mut layers = Vec::new();
                for part in value.split(',') {
                    let kf = parse_dims(key, part.trim(), 'x')?;
                    if kf.len() != 2 {
                        return Err(Error::InvalidConfig(format!("encoder layer `{part}` must be KxF")));
                    }
                    layers.push(ConvLayerSpec {
                        kernel: kf[0],
                        filters: kf[1],
                    });
                }
                self.encoder = EncoderSpec { layers };
            }
            "decoder_filters" => self.decoder_filters = parse_num(key, value)?,
            "patch_size" => a.patch_size = parse_num(key, value)?,
            "model_dim" => a.model_dim = parse_num(key, value)?,
            "heads" => a.heads = parse_num(key, value)?,
            "layers" => a.layers = parse_num(key, value)?,
            "mlp_hidden" => a.mlp_hidden = parse_num(key, value)?,
            "head_convention" => a.head_convention = HeadConvention::parse(value)?,
            "attention_scale" => a.scale = AttentionScale::parse(value)?,
            "projection_bias" => a.projection_bias = parse_bool(key, value)?,
            "second_residual" => a.second_residual = parse_bool(key, value)?,
            "final_norm" => a.final_norm = parse_bool(key, value)?,
            "head_widths" => {
                self.head_widths = if value.is_empty() {
                    Vec::new()
                } else {
                    parse_dims(key, value, ',')?
                }
            }
            "dropout" => {
                self.dropout = value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("`dropout`: bad number `{value}`")))?
            }
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: bad integer `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}`: bad flag `{value}`"))),
    }
}

fn parse_dims(key: &str, value: &str, sep: char) -> Result<Vec<usize>> {
    value.split(sep).map(|p| parse_num(key, p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_every_variant() {
        for v in Variant::ALL {
            let mut cfg = ModelConfig::for_variant(v).with_seed(99);
            cfg.attention.head_convention = HeadConvention::WholeDk;
            let back = ModelConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_text_uses_variant_defaults() {
        let cfg = ModelConfig::parse("# ablation\nvariant = attention_only\nseed = 3\n").unwrap();
        assert_eq!(cfg.attention.patch_size, 36);
        assert_eq!(cfg.seed, 3);
        let cfg = ModelConfig::parse("variant = encoder_attention").unwrap();
        assert_eq!((cfg.attention.patch_size, cfg.attention.model_dim), (1, 16));
    }

    #[test]
    fn rejects_bad_text() {
        assert!(ModelConfig::parse("patch_size 4").is_err());
        assert!(ModelConfig::parse("bogus = 1").is_err());
        assert!(ModelConfig::parse("heads = 4\nheads = 2").is_err());
        assert!(ModelConfig::parse("heads = 3").is_err());
        assert!(ModelConfig::parse("dropout = 1.5").is_err());
        assert!(ModelConfig::parse("input = 180x60").is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
    }
}
