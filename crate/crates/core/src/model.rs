//! The frozen pretrained GAN the method starts from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{RowSchedule, SCode};
use crate::nets::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Image, MappingNetwork, ParamTree, StyleMapper,
};
use crate::real::Real;
use crate::stn::{StnBank, StnInit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl BaseConfig {
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
        }
    }

    pub fn micro() -> Self {
        Self {
            generator: GeneratorConfig::micro(),
            discriminator: DiscriminatorConfig::micro(),
        }
    }
}

/// Mapping network `P`, style mapper `S`, synthesis network `G_theta0` and
/// discriminator `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<T> {
    pub config: BaseConfig,
    pub mapping: MappingNetwork<T>,
    pub styler: StyleMapper<T>,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Real> BaseModel<T> {
    pub fn init(config: &BaseConfig, seed: u64) -> Result<Self> {
        let g = &config.generator;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapping = MappingNetwork::new(&mut rng, g.z_dim, g.w_dim, g.mapping_depth, g.schedule.len());
        let styler = StyleMapper::new(&mut rng, &g.schedule, g.w_dim);
        let generator = Generator::new(&mut rng, g)?;
        let discriminator = Discriminator::new(&mut rng, &config.discriminator)?;
        Ok(Self {
            config: config.clone(),
            mapping,
            styler,
            generator,
            discriminator,
        })
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let g = &self.config.generator;
        (g.image_channels, g.resolution(), g.resolution())
    }

    pub fn cast<U: Real>(&self) -> BaseModel<U> {
        let mut out = BaseModel::<U>::init(&self.config, 0).expect("config already validated");
        self.mapping.cast_into(&mut out.mapping);
        self.styler.cast_into(&mut out.styler);
        self.generator.cast_into(&mut out.generator);
        self.discriminator.cast_into(&mut out.discriminator);
        out
    }
}

/// Where a fine-tuned model came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the canonical training configuration.
    pub config_hash: String,
    /// SHA-256 of the base model archive the run started from.
    pub base_hash: String,
    pub seed: u64,
    pub iterations: usize,
    /// Resolved training configuration as JSON.
    pub config: String,
}

/// Fine-tuned synthesis parameters `theta_hat` plus one STN per style, on top
/// of the frozen base model (which keeps `theta0` for inversion).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStyleModel<T = f32> {
    pub base: BaseModel<T>,
    pub generator: Generator<T>,
    pub bank: StnBank<T>,
    pub provenance: Provenance,
}

impl<T: Real> MultiStyleModel<T> {
    /// Identity bank and `theta_hat = theta0`.
    pub fn untrained(base: BaseModel<T>, names: Vec<String>) -> Result<Self> {
        let bank = StnBank::new(names, base.generator.schedule(), StnInit::Identity, 0)?;
        Ok(Self {
            generator: base.generator.clone(),
            base,
            bank,
            provenance: Provenance::default(),
        })
    }

    pub fn names(&self) -> &[String] {
        self.bank.names()
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn schedule(&self) -> &RowSchedule {
        self.generator.schedule()
    }

    pub fn style_index(&self, name: &str) -> Result<usize> {
        self.bank.index_of(name)
    }

    /// `T_k(s)`.
    pub fn to_multistyle(&self, s: &SCode<T>, k: usize) -> Result<SCode<T>> {
        let stn = self
            .bank
            .stns()
            .get(k)
            .ok_or_else(|| Error::Lookup(format!("style index {k} out of {} styles", self.len())))?;
        stn.apply(s)
    }

    /// `G_theta_hat(T_k(s))`.
    pub fn synthesize(&self, s: &SCode<T>, k: usize) -> Result<Image<T>> {
        self.generator.synthesize(&self.to_multistyle(s, k)?)
    }
}
