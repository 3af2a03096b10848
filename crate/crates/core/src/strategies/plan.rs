//! Block plans and their line-oriented text format.
//!
//! ```text
//! # comment
//! input 4 16 8 8        # optional: n c h w used for buffer accounting
//! residual              # optional: identity skip around the whole block
//! 16 8 1 0.01 inplace_abn_i
//! 8 8 3 0.01 inplace_abn_i
//! 8 16 1 0.01 inplace_abn_i
//! ```
//!
//! Each layer line reads `in_channels out_channels kernel slope strategy
//! [fixed_gamma]`. An `out_channels` of `-` means BN+Act with no
//! convolution. Convolutions use stride 1 and padding `kernel / 2`. Every
//! layer line must name the same strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationFn;
use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Standard,
    Checkpointing,
    CheckpointingProposed,
    InPlaceAbnI,
    InPlaceAbnII,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Standard,
        Strategy::Checkpointing,
        Strategy::CheckpointingProposed,
        Strategy::InPlaceAbnI,
        Strategy::InPlaceAbnII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Checkpointing => "checkpointing",
            Strategy::CheckpointingProposed => "checkpointing_proposed",
            Strategy::InPlaceAbnI => "inplace_abn_i",
            Strategy::InPlaceAbnII => "inplace_abn_ii",
        }
    }

    pub fn requires_invertible_activation(self) -> bool {
        matches!(
            self,
            Strategy::CheckpointingProposed | Strategy::InPlaceAbnI | Strategy::InPlaceAbnII
        )
    }

    /// Strategies that recover `y` and `xhat` backwards from the stored `z`.
    pub fn is_in_place(self) -> bool {
        matches!(self, Strategy::InPlaceAbnI | Strategy::InPlaceAbnII)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "standard" => Ok(Strategy::Standard),
            "checkpointing" => Ok(Strategy::Checkpointing),
            "checkpointingproposed" => Ok(Strategy::CheckpointingProposed),
            "inplaceabni" => Ok(Strategy::InPlaceAbnI),
            "inplaceabnii" => Ok(Strategy::InPlaceAbnII),
            _ => Err(Error::InvalidPlan(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }
}

/// One BN + activation unit, optionally followed by a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub activation: ActivationFn,
    pub conv: Option<ConvSpec>,
    /// Freeze gamma at 1; its gradient is still computed but never applied.
    pub fixed_gamma: bool,
}

impl LayerSpec {
    pub fn bn_act(channels: usize, activation: ActivationFn) -> Self {
        LayerSpec {
            channels,
            activation,
            conv: None,
            fixed_gamma: false,
        }
    }

    pub fn bn_act_conv(
        channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: ActivationFn,
    ) -> Self {
        LayerSpec {
            channels,
            activation,
            conv: Some(ConvSpec::same(out_channels, kernel)),
            fixed_gamma: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.map_or(self.channels, |c| c.out_channels)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels {
            return Err(Error::shape(format!("{} channels", self.channels), input));
        }
        match self.conv {
            None => Ok(input),
            Some(c) => {
                let span = |len: usize| -> Option<usize> {
                    let padded = len + 2 * c.padding;
                    (padded >= c.kernel).then(|| (padded - c.kernel) / c.stride + 1)
                };
                match (span(input.h), span(input.w)) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => {
                        Ok(Shape::new(input.n, c.out_channels, h, w))
                    }
                    _ => Err(Error::InvalidPlan(format!(
                        "convolution output empty for input {input}"
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub layers: Vec<LayerSpec>,
    pub strategy: Strategy,
    pub residual: bool,
}

impl BlockPlan {
    /// A single BN+Act+Conv unit.
    pub fn unit(
        channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: ActivationFn,
        strategy: Strategy,
    ) -> Self {
        BlockPlan {
            layers: vec![LayerSpec::bn_act_conv(
                channels,
                out_channels,
                kernel,
                activation,
            )],
            strategy,
            residual: false,
        }
    }

    /// Pre-activation bottleneck with identity skip: three BN+Act+Conv units
    /// with 1x1, 3x3 and 1x1 kernels.
    pub fn bottleneck(
        channels: usize,
        mid: usize,
        activation: ActivationFn,
        strategy: Strategy,
    ) -> Self {
        BlockPlan {
            layers: vec![
                LayerSpec::bn_act_conv(channels, mid, 1, activation),
                LayerSpec::bn_act_conv(mid, mid, 3, activation),
                LayerSpec::bn_act_conv(mid, channels, 1, activation),
            ],
            strategy,
            residual: true,
        }
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        BlockPlan {
            strategy,
            ..self.clone()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidPlan("plan has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].channels {
                return Err(Error::InvalidPlan(format!(
                    "layer {} produces {} channels but layer {} expects {}",
                    i,
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].channels
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 {
                return Err(Error::InvalidPlan(format!("layer {i} has zero channels")));
            }
            if let Some(c) = l.conv {
                if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                    return Err(Error::InvalidPlan(format!(
                        "layer {i} has a degenerate convolution"
                    )));
                }
            }
            if self.strategy.requires_invertible_activation() && !l.activation.is_invertible() {
                return Err(Error::InvalidPlan(format!(
                    "strategy {} needs an invertible activation, layer {i} has slope {}",
                    self.strategy,
                    l.activation.slope()
                )));
            }
        }
        if self.residual && self.in_channels() != self.out_channels() {
            return Err(Error::InvalidPlan(format!(
                "residual block maps {} channels to {}",
                self.in_channels(),
                self.out_channels()
            )));
        }
        Ok(())
    }

    /// Output shape for a given input, checking the skip connection.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let out = self
            .layers
            .iter()
            .try_fold(input, |s, l| l.output_shape(s))?;
        if self.residual && out != input {
            return Err(Error::shape(format!("skip-compatible output {input}"), out));
        }
        Ok(out)
    }
}

/// A parsed plan file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub plan: BlockPlan,
    pub input: Option<Shape>,
}

impl PlanFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut strategy: Option<Strategy> = None;
        let mut residual = false;
        let mut input = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::InvalidPlan(format!("line {}: {msg}", lineno + 1));
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "residual" if tokens.len() == 1 => residual = true,
                "input" => {
                    let dims: Vec<usize> = tokens[1..]
                        .iter()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(format!("bad input dims: {e}")))?;
                    if dims.len() != 4 || dims.contains(&0) {
                        return Err(bad("input needs four positive dims: n c h w".into()));
                    }
                    input = Some(Shape::new(dims[0], dims[1], dims[2], dims[3]));
                }
                _ => {
                    if !(5..=6).contains(&tokens.len()) {
                        return Err(bad(format!(
                            "expected `in out kernel slope strategy [fixed_gamma]`, got {} fields",
                            tokens.len()
                        )));
                    }
                    let channels: usize = tokens[0]
                        .parse()
                        .map_err(|e| bad(format!("in_channels: {e}")))?;
                    let out: Option<usize> = match tokens[1] {
                        "-" => None,
                        t => Some(t.parse().map_err(|e| bad(format!("out_channels: {e}")))?),
                    };
                    let kernel: usize =
                        tokens[2].parse().map_err(|e| bad(format!("kernel: {e}")))?;
                    let slope: f64 = tokens[3].parse().map_err(|e| bad(format!("slope: {e}")))?;
                    let activation =
                        ActivationFn::leaky_relu(slope).map_err(|e| bad(e.to_string()))?;
                    let s: Strategy = tokens[4].parse().map_err(|e: Error| bad(e.to_string()))?;
                    if let Some(prev) = strategy {
                        if prev != s {
                            return Err(bad(format!(
                                "mixed strategies {prev} and {s} in one block"
                            )));
                        }
                    }
                    strategy = Some(s);
                    let fixed_gamma = match tokens.get(5) {
                        None => false,
                        Some(&"fixed_gamma") => true,
                        Some(other) => return Err(bad(format!("unknown flag `{other}`"))),
                    };
                    layers.push(LayerSpec {
                        channels,
                        activation,
                        conv: out.map(|o| ConvSpec::same(o, kernel)),
                        fixed_gamma,
                    });
                }
            }
        }
        let plan = BlockPlan {
            layers,
            strategy: strategy.ok_or_else(|| Error::InvalidPlan("plan has no layers".into()))?,
            residual,
        };
        plan.validate()?;
        if let Some(shape) = input {
            plan.output_shape(shape)?;
        }
        Ok(PlanFile { plan, input })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(s) = self.input {
            out.push_str(&format!("input {} {} {} {}\n", s.n, s.c, s.h, s.w));
        }
        if self.plan.residual {
            out.push_str("residual\n");
        }
        for l in &self.plan.layers {
            let (o, k) = match l.conv {
                Some(c) => (c.out_channels.to_string(), c.kernel),
                None => ("-".to_string(), 1),
            };
            out.push_str(&format!(
                "{} {} {} {} {}{}\n",
                l.channels,
                o,
                k,
                l.activation.slope(),
                self.plan.strategy,
                if l.fixed_gamma { " fixed_gamma" } else { "" }
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(
            "InPlaceABN_II".parse::<Strategy>().unwrap(),
            Strategy::InPlaceAbnII
        );
        assert!("inplace".parse::<Strategy>().is_err());
    }

    #[test]
    fn in_place_with_relu_rejected() {
        let relu = ActivationFn::leaky_relu(0.0).unwrap();
        for s in Strategy::ALL {
            let res = BlockPlan::unit(4, 4, 3, relu, s).validate();
            assert_eq!(res.is_err(), s.requires_invertible_activation(), "{s}");
        }
    }

    #[test]
    fn channel_chain_checked() {
        let act = ActivationFn::default();
        let mut plan = BlockPlan::bottleneck(8, 4, act, Strategy::Standard);
        plan.validate().unwrap();
        plan.layers[1].channels = 5;
        assert!(plan.validate().is_err());

        let mut res = BlockPlan::unit(4, 6, 1, act, Strategy::Standard);
        res.residual = true;
        assert!(res.validate().is_err());
    }

    #[test]
    fn bottleneck_output_shape() {
        let plan = BlockPlan::bottleneck(8, 4, ActivationFn::default(), Strategy::InPlaceAbnI);
        let s = Shape::new(2, 8, 5, 5);
        assert_eq!(plan.output_shape(s).unwrap(), s);
        assert!(plan.output_shape(Shape::new(2, 4, 5, 5)).is_err());
    }

    #[test]
    fn parse_plan_file() {
        let text = "# fig 1\ninput 2 16 8 8\nresidual\n16 8 1 0.01 inplace_abn_i\n8 8 3 0.01 inplace_abn_i # mid\n8 16 1 0.01 inplace_abn_i fixed_gamma\n";
        let pf = PlanFile::parse(text).unwrap();
        assert_eq!(pf.input, Some(Shape::new(2, 16, 8, 8)));
        assert!(pf.plan.residual);
        assert_eq!(pf.plan.strategy, Strategy::InPlaceAbnI);
        assert_eq!(pf.plan.layers.len(), 3);
        assert_eq!(pf.plan.layers[1].conv, Some(ConvSpec::same(8, 3)));
        assert!(pf.plan.layers[2].fixed_gamma);
        assert_eq!(PlanFile::parse(&pf.to_text()).unwrap(), pf);
    }

    #[test]
    fn parse_no_conv_layer() {
        let pf = PlanFile::parse("4 - 1 0.1 standard\n").unwrap();
        assert_eq!(pf.plan.layers[0].conv, None);
        assert_eq!(PlanFile::parse(&pf.to_text()).unwrap(), pf);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "",
            "# only comments\n",
            "4 4 3 0.01\n",
            "4 4 3 0.01 standard\n4 4 3 0.01 inplace_abn_i\n",
            "4 4 3 0.0 inplace_abn_ii\n",
            "4 4 3 2.0 standard\n",
            "4 x 3 0.01 standard\n",
            "input 1 2 3\n4 4 3 0.01 standard\n",
            "input 1 8 4 4\n4 4 3 0.01 standard\n",
            "4 4 3 0.01 standard frozen\n",
        ] {
            assert!(PlanFile::parse(bad).is_err(), "accepted {bad:?}");
        }
    }
}
