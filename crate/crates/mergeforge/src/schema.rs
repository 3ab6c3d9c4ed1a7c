//! Architecture schemas: which tensors belong to which component layer, and
//! how layers fold into merge groups at a given granularity.
//!
//! A schema declares layer counts for the image encoder (`l`), prompt
//! encoder (`k`) and mask decoder (`z` transformer + `p` upscaling layers),
//! plus standalone extra groups (patch embedding, positional embedding,
//! neck). Granularities `g` chunk consecutive layers so that each chunk
//! shares one merging method; a component with `n` layers yields
//! `ceil(n / g)` groups, and the decoder counts its transformer and
//! upscaling layers together.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ModelParams;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("granularity must be >= 1, got {0}")]
    InvalidGranularity(usize),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("tensor `{0}` matches no membership rule")]
    UnmatchedTensor(String),
}

#[derive(Debug, Error)]
pub enum CompatError {
    #[error("need at least 2 models to compare, got {0}")]
    TooFewModels(usize),
    #[error(
        "model {index} tensor names differ: missing {missing:?}, unexpected {unexpected:?}"
    )]
    NameSetMismatch {
        index: usize,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("model {index} tensor `{name}`: shape {found:?} differs from {expected:?}")]
    ShapeMismatch {
        index: usize,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Prompt,
    Decoder,
    Extra,
}

/// Maps a tensor-name prefix onto (component, layer index). Decoder layers
/// are indexed over transformer and upscaling layers combined; extra rules
/// use the index into [`ArchitectureSchema::extra_groups`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipRule {
    pub prefix: String,
    pub component: Component,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSchema {
    pub encoder_layers: usize,
    pub prompt_layers: usize,
    pub decoder_transformer_layers: usize,
    pub decoder_conv_layers: usize,
    pub extra_groups: Vec<String>,
    pub layer_membership: Vec<MembershipRule>,
}

impl ArchitectureSchema {
    /// The SAM ViT-B layout: 12 encoder blocks, 4 prompt encoder layers, a
    /// mask decoder with 2 transformer and 3 upscaling layers, and singleton
    /// groups for patch embedding, positional embedding and neck.
    pub fn sam_vit_b() -> Self {
        let mut rules = Vec::new();
        for i in 0..12 {
            rules.push(MembershipRule {
                prefix: format!("image_encoder.blocks.{i}."),
                component: Component::Encoder,
                layer: i,
            });
        }
        for i in 0..4 {
            rules.push(MembershipRule {
                prefix: format!("prompt_encoder.layers.{i}."),
                component: Component::Prompt,
                layer: i,
            });
        }
        for i in 0..2 {
            rules.push(MembershipRule {
                prefix: format!("mask_decoder.transformer.{i}."),
                component: Component::Decoder,
                layer: i,
            });
        }
        for i in 0..3 {
            rules.push(MembershipRule {
                prefix: format!("mask_decoder.upscaling.{i}."),
                component: Component::Decoder,
                layer: 2 + i,
            });
        }
        for (i, prefix) in [
            "image_encoder.patch_embed",
            "image_encoder.pos_embed",
            "image_encoder.neck",
        ]
        .iter()
        .enumerate()
        {
            rules.push(MembershipRule {
                prefix: (*prefix).to_string(),
                component: Component::Extra,
                layer: i,
            });
        }
        Self {
            encoder_layers: 12,
            prompt_layers: 4,
            decoder_transformer_layers: 2,
            decoder_conv_layers: 3,
            extra_groups: vec!["patch_embed".into(), "pos_embed".into(), "neck".into()],
            layer_membership: rules,
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.encoder_layers == 0
            || self.prompt_layers == 0
            || self.decoder_transformer_layers == 0
            || self.decoder_conv_layers == 0
        {
            return Err(SchemaError::InvalidSchema(
                "layer counts l, k, z, p must all be >= 1".into(),
            ));
        }
        let unique_extras: BTreeSet<&String> = self.extra_groups.iter().collect();
        if unique_extras.len() != self.extra_groups.len() {
            return Err(SchemaError::InvalidSchema("duplicate extra group name".into()));
        }
        let mut prefixes = BTreeSet::new();
        for rule in &self.layer_membership {
            if !prefixes.insert(&rule.prefix) {
                return Err(SchemaError::InvalidSchema(format!(
                    "duplicate membership prefix `{}`",
                    rule.prefix
                )));
            }
            let bound = match rule.component {
                Component::Encoder => self.encoder_layers,
                Component::Prompt => self.prompt_layers,
                Component::Decoder => self.decoder_layers(),
                Component::Extra => self.extra_groups.len(),
            };
            if rule.layer >= bound {
                return Err(SchemaError::InvalidSchema(format!(
                    "rule `{}` references layer {} but the component has {}",
                    rule.prefix, rule.layer, bound
                )));
            }
        }
        Ok(())
    }

    /// Combined decoder layer count (transformer + upscaling).
    pub fn decoder_layers(&self) -> usize {
        self.decoder_transformer_layers + self.decoder_conv_layers
    }

    /// Resolve a tensor name to its (component, layer). Longest matching
    /// prefix wins.
    pub fn membership_of(&self, name: &str) -> Result<(Component, usize), SchemaError> {
        self.layer_membership
            .iter()
            .filter(|r| name.starts_with(&r.prefix))
            .max_by_key(|r| r.prefix.len())
            .map(|r| (r.component, r.layer))
            .ok_or_else(|| SchemaError::UnmatchedTensor(name.to_string()))
    }

    /// Number of groups produced at the given granularities, extras included.
    pub fn group_count(&self, g_enc: usize, g_prompt: usize, g_dec: usize) -> usize {
        self.encoder_layers.div_ceil(g_enc)
            + self.prompt_layers.div_ceil(g_prompt)
            + self.decoder_layers().div_ceil(g_dec)
            + self.extra_groups.len()
    }

    /// The largest possible group count (granularity 1 everywhere).
    pub fn max_groups(&self) -> usize {
        self.group_count(1, 1, 1)
    }
}

/// A contiguous run of layers merged under shared hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroup {
    /// 1-based group index.
    pub id: usize,
    pub component: Component,
    /// Layer span `[start, end)` within the component; for extras this is
    /// `[i, i+1)` over the extra-group index.
    pub layer_range: (usize, usize),
    pub tensor_names: Vec<String>,
}

/// Partition all layers into groups: encoder chunks, then prompt chunks,
/// then decoder chunks, then one singleton group per extra. `names` is the
/// tensor-name set of a conforming checkpoint; each name lands in exactly
/// one group (its order within a group follows the input order).
pub fn partition_layers(
    schema: &ArchitectureSchema,
    g_enc: usize,
    g_prompt: usize,
    g_dec: usize,
    names: &[String],
) -> Result<Vec<LayerGroup>, SchemaError> {
    for g in [g_enc, g_prompt, g_dec] {
        if g == 0 {
            return Err(SchemaError::InvalidGranularity(g));
        }
    }
    let mut groups = Vec::with_capacity(schema.group_count(g_enc, g_prompt, g_dec));
    let push_chunks = |component: Component, layers: usize, g: usize, groups: &mut Vec<LayerGroup>| {
        let mut start = 0;
        while start < layers {
            let end = (start + g).min(layers);
            groups.push(LayerGroup {
                id: groups.len() + 1,
                component,
                layer_range: (start, end),
                tensor_names: Vec::new(),
            });
            start = end;
        }
    };
    push_chunks(Component::Encoder, schema.encoder_layers, g_enc, &mut groups);
    push_chunks(Component::Prompt, schema.prompt_layers, g_prompt, &mut groups);
    push_chunks(Component::Decoder, schema.decoder_layers(), g_dec, &mut groups);
    // Offsets of each component's first group, for O(1) name placement.
    let enc_base = 0;
    let prompt_base = schema.encoder_layers.div_ceil(g_enc);
    let dec_base = prompt_base + schema.prompt_layers.div_ceil(g_prompt);
    let extra_base = dec_base + schema.decoder_layers().div_ceil(g_dec);
    for (i, _) in schema.extra_groups.iter().enumerate() {
        groups.push(LayerGroup {
            id: extra_base + i + 1,
            component: Component::Extra,
            layer_range: (i, i + 1),
            tensor_names: Vec::new(),
        });
    }

    for name in names {
        let (component, layer) = schema.membership_of(name)?;
        let idx = match component {
            Component::Encoder => enc_base + layer / g_enc,
            Component::Prompt => prompt_base + layer / g_prompt,
            Component::Decoder => dec_base + layer / g_dec,
            Component::Extra => extra_base + layer,
        };
        groups[idx].tensor_names.push(name.clone());
    }
    Ok(groups)
}

/// Check that all models expose identical tensor names and shapes and that
/// every tensor resolves against the schema.
pub fn validate_compatible(
    models: &[&ModelParams],
    schema: &ArchitectureSchema,
) -> Result<(), CompatError> {
    if models.len() < 2 {
        return Err(CompatError::TooFewModels(models.len()));
    }
    let reference = models[0];
    for (index, model) in models.iter().enumerate().skip(1) {
        let ref_names: BTreeSet<&str> = reference.names().collect();
        let names: BTreeSet<&str> = model.names().collect();
        if ref_names != names {
            let missing = ref_names
                .difference(&names)
                .map(|s| s.to_string())
                .collect();
            let unexpected = names
                .difference(&ref_names)
                .map(|s| s.to_string())
                .collect();
            return Err(CompatError::NameSetMismatch {
                index,
                missing,
                unexpected,
            });
        }
        for tensor in reference.tensors() {
            let other = model.get(&tensor.name).expect("name sets equal");
            if other.shape != tensor.shape {
                return Err(CompatError::ShapeMismatch {
                    index,
                    name: tensor.name.clone(),
                    expected: tensor.shape.clone(),
                    found: other.shape.clone(),
                });
            }
        }
    }
    for name in reference.names() {
        schema.membership_of(name)?;
    }
    Ok(())
}
