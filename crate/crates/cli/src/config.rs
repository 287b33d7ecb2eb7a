//! Pipeline configuration: one TOML file of sections and dotted keys.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shapeseq::pcio::ShapeFamily;
use shapeseq::{CaeConfig, GroupingConfig, SamplingConfig, TransformerConfig, VqConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub family: ShapeFamily,
    pub train_count: usize,
    pub test_count: usize,
    pub points: usize,
    /// Seed of the synthetic shapes; kept apart from the training seed so
    /// that reseeding a run does not change its data.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            family: ShapeFamily::Ellipsoid,
            train_count: 64,
            test_count: 16,
            points: 2048,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSettings {
    /// Train the transformer on depth renderings of the training shapes.
    pub enabled: bool,
    pub image_size: usize,
}

impl Default for ConditionSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Training and sampling seed. Stage seeds are derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub cae: CaeConfig,
    pub grouping: GroupingConfig,
    pub vq: VqConfig,
    pub transformer: TransformerConfig,
    pub sampling: SamplingConfig,
    pub condition: ConditionSettings,
}

impl PipelineConfig {
    /// Small widths and 8 x 512-point shapes; trains end to end in minutes
    /// on one core.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                train_count: 8,
                test_count: 8,
                points: 512,
                ..Default::default()
            },
            cae: CaeConfig {
                edge_widths: vec![32, 32, 64],
                decoder_width: 64,
                sphere_points: 512,
                ..Default::default()
            },
            grouping: GroupingConfig {
                groups: 32,
                ..Default::default()
            },
            vq: VqConfig {
                edge_widths: vec![32, 32, 64],
                decoder_width: 64,
                ..Default::default()
            },
            transformer: TransformerConfig {
                layers: 2,
                heads: 2,
                d_model: 64,
                cond_channels: vec![8, 16, 32, 32],
                ..Default::default()
            },
            sampling: SamplingConfig::default(),
            condition: ConditionSettings::default(),
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config {
            source_name: source.to_string(),
            message: e.to_string(),
        })?;
        config.validate(source)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            source_name: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self, source: &str) -> Result<(), CliError> {
        let fail = |message: String| {
            Err(CliError::Config {
                source_name: source.to_string(),
                message,
            })
        };
        let positive = [
            ("data.train_count", self.data.train_count),
            ("data.test_count", self.data.test_count),
            ("data.points", self.data.points),
            ("cae.k", self.cae.k),
            ("cae.latent_dim", self.cae.latent_dim),
            ("cae.decoder_width", self.cae.decoder_width),
            ("cae.sphere_points", self.cae.sphere_points),
            ("cae.batch_size", self.cae.batch_size),
            ("grouping.groups", self.grouping.groups),
            ("grouping.hidden", self.grouping.hidden),
            ("grouping.batch_size", self.grouping.batch_size),
            ("vq.code_dim", self.vq.code_dim),
            ("vq.feature_dim", self.vq.feature_dim),
            ("vq.k", self.vq.k),
            ("vq.decoder_width", self.vq.decoder_width),
            ("vq.batch_size", self.vq.batch_size),
            ("transformer.layers", self.transformer.layers),
            ("transformer.heads", self.transformer.heads),
            ("transformer.d_model", self.transformer.d_model),
            ("transformer.mlp_ratio", self.transformer.mlp_ratio),
            ("transformer.batch_size", self.transformer.batch_size),
            ("condition.image_size", self.condition.image_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return fail(format!("{key} must be positive"));
            }
        }
        if self.vq.entries < 2 {
            return fail("vq.entries must be at least 2".into());
        }
        if self.cae.edge_widths.is_empty() || self.cae.edge_widths.contains(&0) {
            return fail("cae.edge_widths must be nonempty and positive".into());
        }
        if self.vq.edge_widths.is_empty() || self.vq.edge_widths.contains(&0) {
            return fail("vq.edge_widths must be nonempty and positive".into());
        }
        if self.transformer.cond_channels.len() != 4 || self.transformer.cond_channels.contains(&0) {
            return fail("transformer.cond_channels must list four positive widths".into());
        }
        if self.transformer.d_model % self.transformer.heads != 0 {
            return fail("transformer.d_model must be a multiple of transformer.heads".into());
        }
        if self.data.points <= self.cae.k.max(self.vq.k) {
            return fail("data.points must exceed the neighborhood sizes cae.k and vq.k".into());
        }
        if self.cae.use_emd && self.cae.sphere_points != self.data.points {
            return fail("cae.use_emd needs cae.sphere_points equal to data.points".into());
        }
        if self.vq.use_emd && self.cae.sphere_points != self.data.points {
            return fail("vq.use_emd needs cae.sphere_points equal to data.points".into());
        }
        if self.grouping.groups > self.cae.sphere_points {
            return fail("grouping.groups exceeds cae.sphere_points".into());
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return fail("sampling.top_p must be in (0, 1]".into());
        }
        if !(self.sampling.temperature > 0.0 && self.sampling.temperature.is_finite()) {
            return fail("sampling.temperature must be positive".into());
        }
        for (key, seed) in [
            ("cae.seed", self.cae.seed),
            ("grouping.seed", self.grouping.seed),
            ("vq.seed", self.vq.seed),
            ("transformer.seed", self.transformer.seed),
        ] {
            if seed != 0 {
                return fail(format!("{key} is derived from the top-level seed; set `seed` instead"));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn cae_config(&self) -> CaeConfig {
        CaeConfig {
            seed: self.seed,
            ..self.cae.clone()
        }
    }

    pub fn grouping_config(&self) -> GroupingConfig {
        GroupingConfig {
            seed: self.seed.wrapping_add(1),
            ..self.grouping.clone()
        }
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            seed: self.seed.wrapping_add(2),
            ..self.vq.clone()
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            seed: self.seed.wrapping_add(3),
            ..self.transformer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_round_trips_through_toml() {
        let toy = PipelineConfig::toy();
        toy.validate("toy").unwrap();
        assert_eq!(PipelineConfig::parse(&toy.to_toml(), "toy").unwrap(), toy);
    }

    #[test]
    fn dotted_keys_and_unknown_keys() {
        let c = PipelineConfig::parse("seed = 4\ngrouping.groups = 16\ncae.sphere_points = 2048\n", "t").unwrap();
        assert_eq!((c.seed, c.grouping.groups), (4, 16));
        assert!(matches!(PipelineConfig::parse("grouping.gruops = 16\n", "t"), Err(CliError::Config { .. })));
        assert!(PipelineConfig::parse("vq.entries = 1\n", "t").is_err());
        assert!(PipelineConfig::parse("grouping.groups = 0\n", "t").is_err());
        assert!(PipelineConfig::parse("vq.seed = 3\n", "t").is_err());
    }

    #[test]
    fn shipped_toy_config_matches() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
        assert_eq!(PipelineConfig::load(Path::new(path)).unwrap(), PipelineConfig::toy());
    }
}
