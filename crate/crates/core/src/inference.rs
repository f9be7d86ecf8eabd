//! Stylization with a trained multi-style model, and novel styles made by
//! mixing or sampling in multistyle space.

use std::str::FromStr;

use crate::error::{arg_err, Error, Result};
use crate::inversion::{invert, sample_code, InversionConfig};
use crate::latent::{mix_codes, SCode, StyleMixMask};
use crate::model::MultiStyleModel;
use crate::nets::Image;
use crate::rng;

/// Which styles a request produces.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StyleSelection {
    #[default]
    All,
    Names(Vec<String>),
}

impl FromStr for StyleSelection {
    type Err = Error;

    /// `all`, or a comma-separated list of style names.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        let names: Vec<String> = s.split(',').map(|n| n.trim().to_string()).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(arg_err!("empty style name in selection `{s}`"));
        }
        Ok(Self::Names(names))
    }
}

impl StyleSelection {
    /// Style indices in output order.
    pub fn resolve(&self, model: &MultiStyleModel) -> Result<Vec<usize>> {
        match self {
            Self::All => Ok((0..model.len()).collect()),
            Self::Names(names) => names.iter().map(|n| model.style_index(n)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StylizationRequest {
    pub input: Image,
    pub styles: StyleSelection,
    pub inversion: InversionConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stylization {
    /// `S(I_G(u))`, the inverted input.
    pub code: SCode<f32>,
    /// Base-generator reconstruction of the input.
    pub reconstruction: Image,
    pub outputs: Vec<(String, Image)>,
}

/// `G_theta_hat(T_k(s))` for each index in order.
pub fn stylize_code(model: &MultiStyleModel, code: &SCode<f32>, styles: &[usize]) -> Result<Vec<(String, Image)>> {
    styles
        .iter()
        .map(|&k| {
            let name = model
                .names()
                .get(k)
                .ok_or_else(|| Error::Lookup(format!("style index {k} out of {} styles", model.len())))?;
            Ok((name.clone(), model.synthesize(code, k)?))
        })
        .collect()
}

/// Inverts the input with the base generator and renders the selected styles.
pub fn stylize(model: &MultiStyleModel, req: &StylizationRequest) -> Result<Stylization> {
    let styles = req.styles.resolve(model)?;
    req.input.ensure_dims(model.base.image_dims())?;
    let inv = invert(&model.base, &req.input, &req.inversion, req.seed)?;
    let reconstruction = model.base.generator.synthesize(&inv.code)?;
    let outputs = stylize_code(model, &inv.code, &styles)?;
    Ok(Stylization {
        code: inv.code,
        reconstruction,
        outputs,
    })
}

/// Stylizes an image that is itself a style image; the pipeline is the same
/// as for any other input.
pub fn restylize(model: &MultiStyleModel, style_image: &Image, req: &StylizationRequest) -> Result<Stylization> {
    stylize(
        model,
        &StylizationRequest {
            input: style_image.clone(),
            ..req.clone()
        },
    )
}

/// Where a multistyle code comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MixSource {
    /// `T_style(code)` for a given style-space code, e.g. an inverted input.
    Code { code: SCode<f32>, style: usize },
    /// `T_style(S(P(z)))` with `z` drawn from `seed`.
    Random { seed: u64, style: usize },
}

impl MixSource {
    pub fn resolve(&self, model: &MultiStyleModel) -> Result<SCode<f32>> {
        match self {
            Self::Code { code, style } => model.to_multistyle(code, *style),
            Self::Random { seed, style } => {
                model.to_multistyle(&sample_code(&model.base.mapping, &model.base.styler, *seed)?, *style)
            }
        }
    }
}

/// Blends rows of a partner multistyle code into a base one, restricted to
/// the high-resolution tail.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelMixSpec {
    pub base: MixSource,
    pub partner: MixSource,
    /// First row of the tail range; rows before it always come from `base`.
    pub start_row: usize,
    /// Rows with bit 1 are taken from `partner`.
    pub blend: StyleMixMask,
}

/// Start row of the default tail: the last 40% of rows.
pub fn default_mix_start(rows: usize) -> usize {
    rows - (0.4 * rows as f64).round() as usize
}

impl NovelMixSpec {
    /// Blend every row of the default tail.
    pub fn tail(base: MixSource, partner: MixSource, rows: usize) -> Self {
        let start_row = default_mix_start(rows);
        let blend = StyleMixMask::new((0..rows).map(|i| i >= start_row).collect());
        Self {
            base,
            partner,
            start_row,
            blend,
        }
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.start_row > rows {
            return Err(arg_err!("mix start row {} beyond {rows} rows", self.start_row));
        }
        if self.blend.len() != rows {
            return Err(arg_err!("blend mask has {} bits for {rows} rows", self.blend.len()));
        }
        if let Some(i) = self.blend.bits()[..self.start_row].iter().position(|&b| b) {
            return Err(arg_err!("blend bit {i} lies before the mix range starting at {}", self.start_row));
        }
        Ok(())
    }
}

/// The blended multistyle code of a spec.
pub fn novel_mix_code(model: &MultiStyleModel, spec: &NovelMixSpec) -> Result<SCode<f32>> {
    spec.validate(model.schedule().len())?;
    let base = spec.base.resolve(model)?;
    let partner = spec.partner.resolve(model)?;
    // mix_codes keeps its first argument where the mask is set
    mix_codes(&partner, &base, &spec.blend)
}

pub fn novel_mix(model: &MultiStyleModel, spec: &NovelMixSpec) -> Result<Image> {
    model.generator.synthesize(&novel_mix_code(model, spec)?)
}

/// Random draws from multistyle space: `G(T_k(S(P(z))))` with `k` uniform
/// unless forced. Returns the chosen style index with each image.
pub fn sample_multistyle(
    model: &MultiStyleModel,
    seed: u64,
    count: usize,
    style: Option<usize>,
) -> Result<Vec<(usize, Image)>> {
    if count == 0 {
        return Err(arg_err!("sample count must be >= 1"));
    }
    if let Some(k) = style.filter(|&k| k >= model.len()) {
        return Err(Error::Lookup(format!("style index {k} out of {} styles", model.len())));
    }
    (0..count)
        .map(|j| {
            let draw = rng::derive(seed, &[j as u64]);
            let k = style.unwrap_or_else(|| {
                use rand::Rng;
                rng::stream(draw, &[1]).gen_range(0..model.len())
            });
            let s = sample_code(&model.base.mapping, &model.base.styler, draw)?;
            Ok((k, model.synthesize(&s, k)?))
        })
        .collect()
}
