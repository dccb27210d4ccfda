//! Desk-scale classifiers and flat parameter access.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{substream, tags};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Fully-connected ReLU network. `widths` starts at the flattened input
    /// size and ends at the number of classes.
    Mlp { widths: Vec<usize> },
    /// conv(3×3,16)-relu-pool-conv(3×3,32)-relu-pool-fc(128)-relu-fc(classes).
    SmallConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

const CONV1_FILTERS: usize = 16;
const CONV2_FILTERS: usize = 32;
const FC_HIDDEN: usize = 128;

/// Name, shape and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamInfo {
    fn new(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { name, shape, fan_in }
    }

    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

impl ModelSpec {
    pub fn mlp(widths: Vec<usize>, input_shape: [usize; 3]) -> Self {
        let num_classes = widths.last().copied().unwrap_or(0);
        Self {
            kind: ModelKind::Mlp { widths },
            input_shape,
            num_classes,
        }
    }

    pub fn small_conv(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SmallConv,
            input_shape,
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("zero extent in input shape {:?}", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        match &self.kind {
            ModelKind::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(Error::Spec("MLP needs at least input and output widths".into()));
                }
                if widths.contains(&0) {
                    return Err(Error::Spec(format!("zero-width layer in {widths:?}")));
                }
                if widths[0] != self.input_len() {
                    return Err(Error::Spec(format!(
                        "MLP input width {} does not match input shape {:?}",
                        widths[0], self.input_shape
                    )));
                }
                if *widths.last().unwrap() != self.num_classes {
                    return Err(Error::Spec(format!(
                        "MLP widths must end at num_classes={}, got {widths:?}",
                        self.num_classes
                    )));
                }
            }
            ModelKind::SmallConv => {
                let [_, h, w] = self.input_shape;
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Spec(format!(
                        "small conv net needs spatial extents divisible by 4, got {h}×{w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<ParamInfo> {
        match &self.kind {
            ModelKind::Mlp { widths } => widths
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        ParamInfo::new(format!("fc{}.weight", i + 1), vec![w[1], w[0]], w[0]),
                        ParamInfo::new(format!("fc{}.bias", i + 1), vec![w[1]], w[0]),
                    ]
                })
                .collect(),
            ModelKind::SmallConv => {
                let [c, h, w] = self.input_shape;
                let flat = CONV2_FILTERS * (h / 4) * (w / 4);
                vec![
                    ParamInfo::new("conv1.weight".into(), vec![CONV1_FILTERS, c, 3, 3], c * 9),
                    ParamInfo::new("conv1.bias".into(), vec![CONV1_FILTERS], c * 9),
                    ParamInfo::new(
                        "conv2.weight".into(),
                        vec![CONV2_FILTERS, CONV1_FILTERS, 3, 3],
                        CONV1_FILTERS * 9,
                    ),
                    ParamInfo::new("conv2.bias".into(), vec![CONV2_FILTERS], CONV1_FILTERS * 9),
                    ParamInfo::new("fc1.weight".into(), vec![FC_HIDDEN, flat], flat),
                    ParamInfo::new("fc1.bias".into(), vec![FC_HIDDEN], flat),
                    ParamInfo::new("fc2.weight".into(), vec![self.num_classes, FC_HIDDEN], FC_HIDDEN),
                    ParamInfo::new("fc2.bias".into(), vec![self.num_classes], FC_HIDDEN),
                ]
            }
        }
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            entries: spec
                .layout()
                .into_iter()
                .map(|p| (p.name, Tensor::zeros(&p.shape)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this set's layout from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_count() {
            return Err(Error::dim(
                "unflatten",
                format!("{} values for {} parameters", flat.len(), self.total_count()),
            ));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let n = t.len();
            entries.push((name.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        Ok(ParamSet { entries })
    }
}

/// Kaiming-uniform fan-in initialization: weights ~ U(−√(6/fan_in), √(6/fan_in)),
/// biases zero. Each tensor draws from its own substream.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let entries = spec
        .layout()
        .into_iter()
        .enumerate()
        .map(|(i, info)| {
            let tensor = if info.is_bias() {
                Tensor::zeros(&info.shape)
            } else {
                let bound = (6.0 / info.fan_in as f64).sqrt();
                let mut rng = substream(seed, tags::INIT, i as u64);
                let len = info.shape.iter().product();
                let data = (0..len).map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound).collect();
                Tensor::new(info.shape.clone(), data).expect("layout shape")
            };
            (info.name, tensor)
        })
        .collect();
    Ok(ParamSet { entries })
}

/// Which leaves of a recorded forward pass need gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

impl GradRequest {
    pub const NONE: Self = Self { input: false, params: false };
    pub const INPUT: Self = Self { input: true, params: false };
    pub const PARAMS: Self = Self { input: false, params: true };
}

/// A forward pass kept on a tape for later differentiation.
pub struct Recorded {
    pub tape: Tape,
    pub input: Var,
    pub params: Vec<Var>,
    pub logits: Var,
}

impl Recorded {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != spec.input_shape {
        return Err(Error::dim(
            "forward",
            format!("batch {:?} vs model input [N, {:?}]", s, spec.input_shape),
        ));
    }
    Ok(())
}

/// Records `f_θ(batch)` on a fresh tape.
pub fn forward_recorded(
    params: &ParamSet,
    spec: &ModelSpec,
    batch: &Tensor,
    grads: GradRequest,
) -> Result<Recorded> {
    check_batch(spec, batch)?;
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone(), grads.input);
    let pv: Vec<Var> = params
        .tensors()
        .map(|t| tape.leaf(t.clone(), grads.params))
        .collect();
    let logits = forward_on_tape(&mut tape, spec, input, &pv)?;
    Ok(Recorded {
        tape,
        input,
        params: pv,
        logits,
    })
}

/// Appends the network applied to `input` onto an existing tape, with `p`
/// the parameter leaves in layout order.
pub fn forward_on_tape(tape: &mut Tape, spec: &ModelSpec, input: Var, p: &[Var]) -> Result<Var> {
    check_batch(spec, tape.value(input))?;
    if p.len() != spec.layout().len() {
        return Err(Error::dim(
            "forward",
            format!("{} parameter leaves for {} layout entries", p.len(), spec.layout().len()),
        ));
    }
    match &spec.kind {
        ModelKind::Mlp { widths } => {
            let mut h = tape.flatten(input)?;
            let layers = widths.len() - 1;
            for l in 0..layers {
                let z = tape.matmul_nt(h, p[2 * l])?;
                let z = tape.add_bias(z, p[2 * l + 1])?;
                h = if l + 1 < layers { tape.relu(z) } else { z };
            }
            Ok(h)
        }
        ModelKind::SmallConv => {
            let h = tape.conv2d(input, p[0], 1, 1)?;
            let h = tape.add_bias(h, p[1])?;
            let h = tape.relu(h);
            let h = tape.maxpool2d(h)?;
            let h = tape.conv2d(h, p[2], 1, 1)?;
            let h = tape.add_bias(h, p[3])?;
            let h = tape.relu(h);
            let h = tape.maxpool2d(h)?;
            let h = tape.flatten(h)?;
            let h = tape.matmul_nt(h, p[4])?;
            let h = tape.add_bias(h, p[5])?;
            let h = tape.relu(h);
            let h = tape.matmul_nt(h, p[6])?;
            tape.add_bias(h, p[7])
        }
    }
}

/// Logits without gradient bookkeeping.
pub fn forward(params: &ParamSet, spec: &ModelSpec, batch: &Tensor) -> Result<Tensor> {
    let rec = forward_recorded(params, spec, batch, GradRequest::NONE)?;
    Ok(rec.logits().clone())
}

/// Logits over a large set evaluated in chunks of `chunk` rows.
pub fn forward_chunked(params: &ParamSet, spec: &ModelSpec, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * spec.num_classes);
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        let logits = forward(params, spec, &images.gather(part))?;
        data.extend_from_slice(logits.data());
    }
    Tensor::new(vec![n, spec.num_classes], data)
}
