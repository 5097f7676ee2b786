//! Feature extractor, source classifier and domain discriminator as small
//! MLPs on top of the autodiff tape.
//!
//! The discriminator sees the features through a gradient reversal node, so
//! a single backward pass trains it to separate domains while pushing the
//! feature extractor the opposite way.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::textio::{fmt_exact, numbered_lines, parse_f64, parse_usize};

/// Domain label of source samples in the discriminator output.
pub const SOURCE_DOMAIN: usize = 0;
/// Domain label of target samples in the discriminator output.
pub const TARGET_DOMAIN: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the feature extractor; the last entry is the
    /// feature dimension.
    pub feature_dims: Vec<usize>,
    pub num_source_classes: usize,
    /// Hidden widths of the discriminator before its 2-way output layer.
    pub discriminator_dims: Vec<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults sized for the low-dimensional synthetic task.
    pub fn new(input_dim: usize, num_source_classes: usize) -> Self {
        Self {
            input_dim,
            feature_dims: vec![16, 8],
            num_source_classes,
            discriminator_dims: vec![8],
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Parameter("input_dim must be positive".into()));
        }
        if self.feature_dims.is_empty() {
            return Err(Error::Parameter("feature_dims must not be empty".into()));
        }
        if self
            .feature_dims
            .iter()
            .chain(&self.discriminator_dims)
            .any(|&d| d == 0)
        {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        if self.num_source_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 source classes, got {}",
                self.num_source_classes
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_dims.last().expect("validated non-empty")
    }
}

/// A dense layer `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Which network a parameter matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Feature,
    Classifier,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub feature: Vec<Linear>,
    pub classifier: Linear,
    pub discriminator: Vec<Linear>,
}

fn uniform_layer(rng: &mut ChaCha8Rng, input: usize, output: usize, scale: f64) -> Linear {
    let bound = scale / (input as f64).sqrt();
    let mut layer = Linear::zeros(input, output);
    for w in layer.weight.data_mut() {
        let u: f64 = rng.random();
        *w = (2.0 * u - 1.0) * bound;
    }
    layer
}

/// Draws weights uniformly in `±init_scale / sqrt(fan_in)` from a ChaCha8
/// stream seeded with `config.seed`; biases start at zero.
pub fn init_params(config: &ModelConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.init_scale;

    let mut feature = Vec::with_capacity(config.feature_dims.len());
    let mut width = config.input_dim;
    for &out in &config.feature_dims {
        feature.push(uniform_layer(&mut rng, width, out, s));
        width = out;
    }
    let classifier = uniform_layer(&mut rng, width, config.num_source_classes, s);

    let mut discriminator = Vec::with_capacity(config.discriminator_dims.len() + 1);
    let mut dwidth = width;
    for &out in &config.discriminator_dims {
        discriminator.push(uniform_layer(&mut rng, dwidth, out, s));
        dwidth = out;
    }
    discriminator.push(uniform_layer(&mut rng, dwidth, 2, s));

    Ok(NetworkParams {
        feature,
        classifier,
        discriminator,
    })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.feature[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.last().map_or(0, Linear::output_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            feature: self.feature.iter().map(z).collect(),
            classifier: z(&self.classifier),
            discriminator: self.discriminator.iter().map(z).collect(),
        }
    }

    /// `(name, group, matrix)` for every parameter, in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.feature.iter().enumerate() {
            out.push((
                format!("feature.{i}.weight"),
                ParamGroup::Feature,
                &l.weight,
            ));
            out.push((format!("feature.{i}.bias"), ParamGroup::Feature, &l.bias));
        }
        out.push((
            "classifier.weight".into(),
            ParamGroup::Classifier,
            &self.classifier.weight,
        ));
        out.push((
            "classifier.bias".into(),
            ParamGroup::Classifier,
            &self.classifier.bias,
        ));
        for (i, l) in self.discriminator.iter().enumerate() {
            out.push((
                format!("discriminator.{i}.weight"),
                ParamGroup::Discriminator,
                &l.weight,
            ));
            out.push((
                format!("discriminator.{i}.bias"),
                ParamGroup::Discriminator,
                &l.bias,
            ));
        }
        out
    }

    /// Mutable matrices tagged with their group, in the order of [`named`].
    ///
    /// [`named`]: NetworkParams::named
    pub fn matrices_mut(&mut self) -> Vec<(ParamGroup, &mut Matrix)> {
        let mut out = Vec::new();
        for l in &mut self.feature {
            out.push((ParamGroup::Feature, &mut l.weight));
            out.push((ParamGroup::Feature, &mut l.bias));
        }
        out.push((ParamGroup::Classifier, &mut self.classifier.weight));
        out.push((ParamGroup::Classifier, &mut self.classifier.bias));
        for l in &mut self.discriminator {
            out.push((ParamGroup::Discriminator, &mut l.weight));
            out.push((ParamGroup::Discriminator, &mut l.bias));
        }
        out
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut bind_layer = |l: &Linear| -> Result<BoundLinear> {
            Ok(BoundLinear {
                weight: tape.leaf(l.weight.clone())?,
                bias: tape.leaf(l.bias.clone())?,
            })
        };
        let feature = self
            .feature
            .iter()
            .map(&mut bind_layer)
            .collect::<Result<_>>()?;
        let classifier = bind_layer(&self.classifier)?;
        let discriminator = self
            .discriminator
            .iter()
            .map(&mut bind_layer)
            .collect::<Result<_>>()?;
        Ok(BoundParams {
            feature,
            classifier,
            discriminator,
        })
    }

    /// Checks that layer shapes chain and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let check_layer = |l: &Linear, input: usize| -> Result<()> {
            if l.weight.rows() != input {
                return Err(Error::dimension(
                    "layer chain",
                    (input, 0),
                    l.weight.shape(),
                ));
            }
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::dimension(
                    "layer bias",
                    l.weight.shape(),
                    l.bias.shape(),
                ));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::NonFinite("parameters"));
            }
            Ok(())
        };
        if self.feature.is_empty() {
            return Err(Error::Parameter("feature extractor has no layers".into()));
        }
        let mut width = self.feature[0].input_dim();
        for l in &self.feature {
            check_layer(l, width)?;
            width = l.output_dim();
        }
        check_layer(&self.classifier, width)?;
        let mut dwidth = width;
        for l in &self.discriminator {
            check_layer(l, dwidth)?;
            dwidth = l.output_dim();
        }
        if dwidth != 2 || self.discriminator.is_empty() {
            return Err(Error::Parameter(
                "discriminator must end in 2 outputs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Parameter node ids on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub feature: Vec<BoundLinear>,
    pub classifier: BoundLinear,
    pub discriminator: Vec<BoundLinear>,
}

impl BoundParams {
    /// Collects parameter adjoints into a [`NetworkParams`]-shaped value.
    pub fn gradients(&self, grads: &Gradients) -> NetworkParams {
        let take = |b: &BoundLinear| Linear {
            weight: grads.get(b.weight).clone(),
            bias: grads.get(b.bias).clone(),
        };
        NetworkParams {
            feature: self.feature.iter().map(take).collect(),
            classifier: take(&self.classifier),
            discriminator: self.discriminator.iter().map(take).collect(),
        }
    }
}

fn linear(tape: &mut Tape, layer: &BoundLinear, x: NodeId) -> Result<NodeId> {
    let h = tape.matmul(x, layer.weight)?;
    tape.add_bias(h, layer.bias)
}

/// Linear/ReLU stack; the last layer stays linear.
fn mlp(tape: &mut Tape, layers: &[BoundLinear], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = linear(tape, layer, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// `n x input_dim` batch to `n x feature_dim` features.
pub fn feature_forward(tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
    mlp(tape, &params.feature, x)
}

/// Softmax probabilities over the source classes.
pub fn classify_forward(tape: &mut Tape, params: &BoundParams, features: NodeId) -> Result<NodeId> {
    let logits = linear(tape, &params.classifier, features)?;
    tape.softmax_rows(logits)
}

/// Domain probabilities `[source, target]` per row, with the features
/// passed through gradient reversal scaled by `grl_coeff`.
pub fn discriminate_forward(
    tape: &mut Tape,
    params: &BoundParams,
    features: NodeId,
    grl_coeff: f64,
) -> Result<NodeId> {
    let reversed = tape.grad_reversal(features, grl_coeff)?;
    let logits = mlp(tape, &params.discriminator, reversed)?;
    tape.softmax_rows(logits)
}

/// Class probabilities for a batch without keeping the tape around.
pub fn predict_proba(params: &NetworkParams, x: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let xn = tape.leaf(x.clone())?;
    let f = feature_forward(&mut tape, &bound, xn)?;
    let p = classify_forward(&mut tape, &bound, f)?;
    Ok(tape.value(p).clone())
}

/// Serializes parameters as one line per matrix:
/// `name,rows,cols,v0,v1,...` with values row-major at full precision.
pub fn params_to_csv(params: &NetworkParams) -> String {
    let mut out = String::new();
    for (name, _, m) in params.named() {
        write!(out, "{name},{},{}", m.rows(), m.cols()).unwrap();
        for &v in m.data() {
            out.push(',');
            out.push_str(&fmt_exact(v));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`params_to_csv`]. Matrices may appear in any order but the
/// names must form a complete, consistently shaped network.
pub fn params_from_csv(text: &str) -> Result<NetworkParams> {
    let mut feature: Vec<(Option<Matrix>, Option<Matrix>)> = Vec::new();
    let mut discriminator: Vec<(Option<Matrix>, Option<Matrix>)> = Vec::new();
    let mut classifier: (Option<Matrix>, Option<Matrix>) = (None, None);
    let mut last_line = 0;

    for (line, content) in numbered_lines(text) {
        last_line = line;
        let mut fields = content.split(',');
        let name = fields.next().unwrap_or_default().trim();
        let rows = parse_usize(fields.next().unwrap_or_default(), line)?;
        let cols = parse_usize(fields.next().unwrap_or_default(), line)?;
        let data = fields
            .map(|f| parse_f64(f, line))
            .collect::<Result<Vec<_>>>()?;
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::parse(line, e.to_string()))?;

        let parts: Vec<&str> = name.split('.').collect();
        let slot = match parts.as_slice() {
            ["classifier", kind] => slot_for(&mut classifier, kind),
            [net @ ("feature" | "discriminator"), idx, kind] => {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad layer index in `{name}`")))?;
                if idx > 64 {
                    return Err(Error::parse(
                        line,
                        format!("layer index too large in `{name}`"),
                    ));
                }
                let layers = if *net == "feature" {
                    &mut feature
                } else {
                    &mut discriminator
                };
                if layers.len() <= idx {
                    layers.resize(idx + 1, (None, None));
                }
                slot_for(&mut layers[idx], kind)
            }
            _ => None,
        }
        .ok_or_else(|| Error::parse(line, format!("unknown parameter name `{name}`")))?;
        if slot.is_some() {
            return Err(Error::parse(line, format!("duplicate parameter `{name}`")));
        }
        *slot = Some(m);
    }

    let finish = |pair: (Option<Matrix>, Option<Matrix>), what: &str| -> Result<Linear> {
        match pair {
            (Some(weight), Some(bias)) => Ok(Linear { weight, bias }),
            _ => Err(Error::parse(
                last_line,
                format!("missing weight or bias for {what}"),
            )),
        }
    };
    let feature = feature
        .into_iter()
        .enumerate()
        .map(|(i, p)| finish(p, &format!("feature.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let classifier = finish(classifier, "classifier")?;
    let discriminator = discriminator
        .into_iter()
        .enumerate()
        .map(|(i, p)| finish(p, &format!("discriminator.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let params = NetworkParams {
        feature,
        classifier,
        discriminator,
    };
    params
        .validate()
        .map_err(|e| Error::parse(last_line, e.to_string()))?;
    Ok(params)
}

fn slot_for<'a>(
    pair: &'a mut (Option<Matrix>, Option<Matrix>),
    kind: &str,
) -> Option<&'a mut Option<Matrix>> {
    match kind {
        "weight" => Some(&mut pair.0),
        "bias" => Some(&mut pair.1),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..ModelConfig::new(2, 3)
        }
    }

    #[test]
    fn zero_init_scale_gives_zero_weights() {
        let cfg = ModelConfig {
            init_scale: 0.0,
            ..small_config(3)
        };
        let p = init_params(&cfg).unwrap();
        assert!(p
            .named()
            .iter()
            .all(|(_, _, m)| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(&small_config(1)).unwrap();
        let b = init_params(&small_config(1)).unwrap();
        assert_eq!(params_to_csv(&a), params_to_csv(&b));
        let c = init_params(&small_config(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let cfg = ModelConfig {
            init_scale: 0.7,
            ..small_config(5)
        };
        let p = init_params(&cfg).unwrap();
        p.validate().unwrap();
        for (name, _, m) in p.named() {
            if name.ends_with("bias") {
                assert!(m.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = 0.7 / (m.rows() as f64).sqrt();
                assert!(m.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
        assert_eq!(p.discriminator.last().unwrap().weight.cols(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(2, 1).validate().is_err());
        assert!(ModelConfig {
            feature_dims: vec![],
            ..ModelConfig::new(2, 3)
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            feature_dims: vec![4, 0],
            ..ModelConfig::new(2, 3)
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            init_scale: -1.0,
            ..ModelConfig::new(2, 3)
        }
        .validate()
        .is_err());
    }

    fn single_layer_params(weight: Matrix, classes: usize) -> NetworkParams {
        let dim = weight.cols();
        NetworkParams {
            feature: vec![Linear {
                bias: Matrix::zeros(1, dim),
                weight,
            }],
            classifier: Linear::zeros(dim, classes),
            discriminator: vec![Linear::zeros(dim, 2)],
        }
    }

    #[test]
    fn identity_feature_layer_passes_inputs_through() {
        let p = single_layer_params(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), 3);
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let xv = Matrix::from_rows(&[[0.3, -1.2], [2.0, 5.0]]);
        let x = t.leaf(xv.clone()).unwrap();
        let f = feature_forward(&mut t, &b, x).unwrap();
        assert_eq!(t.value(f), &xv);
    }

    #[test]
    fn zero_weights_give_zero_features_and_uniform_heads() {
        let cfg = ModelConfig {
            init_scale: 0.0,
            ..ModelConfig::new(2, 4)
        };
        let p = init_params(&cfg).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let x = t
            .leaf(Matrix::from_rows(&[[1.0, -3.0], [0.5, 0.5]]))
            .unwrap();
        let f = feature_forward(&mut t, &b, x).unwrap();
        assert!(t.value(f).data().iter().all(|&v| v == 0.0));
        let y = classify_forward(&mut t, &b, f).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.25));
        let d = discriminate_forward(&mut t, &b, f, 0.3).unwrap();
        assert!(t.value(d).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classifier_hand_computed_case() {
        let p = NetworkParams {
            feature: vec![Linear {
                weight: Matrix::from_rows(&[[1.0]]),
                bias: Matrix::zeros(1, 1),
            }],
            classifier: Linear {
                weight: Matrix::from_rows(&[[2.0, 0.0]]),
                bias: Matrix::zeros(1, 2),
            },
            discriminator: vec![Linear::zeros(1, 2)],
        };
        let probs = predict_proba(&p, &Matrix::from_rows(&[[1.0]])).unwrap();
        let e2 = 2f64.exp();
        assert!((probs.get(0, 0) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((probs.get(0, 1) - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = init_params(&ModelConfig::new(3, 2)).unwrap();
        assert!(matches!(
            predict_proba(&p, &Matrix::zeros(2, 2)),
            Err(Error::Dimension { .. })
        ));
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let f = t.leaf(Matrix::zeros(1, 8)).unwrap();
        assert!(discriminate_forward(&mut t, &b, f, -1.0).is_err());
    }

    #[test]
    fn params_csv_round_trip_and_errors() {
        let p = init_params(&small_config(9)).unwrap();
        let text = params_to_csv(&p);
        assert_eq!(params_from_csv(&text).unwrap(), p);

        let broken = text.replacen("classifier.bias", "classifier.bogus", 1);
        assert!(matches!(params_from_csv(&broken), Err(Error::Parse { .. })));
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("classifier.bias"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(params_from_csv(&missing).is_err());
        let bad_number = "feature.0.weight,1,1,abc\n";
        assert!(matches!(
            params_from_csv(bad_number),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
