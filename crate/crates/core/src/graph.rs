//! Layer definitions and the validated model DAG.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::modelfile;
use crate::tensor::checked_numel;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels][in_channels][kernel_h][kernel_w]`, row-major.
    pub weights: Vec<f32>,
}

impl Conv2d {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Inference-mode batch normalization, evaluated as a per-channel scale and
/// shift: `scale = gamma / sqrt(var + eps)`, `shift = beta - mean * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// True while running statistics still hold their initial values.
    pub fn is_at_init(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.var.iter().all(|&v| v == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features][in_features]`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Add,
    MaxPool(Pool),
    GlobalAvgPool,
    Dense(Dense),
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "Conv2D",
            LayerKind::BatchNorm(_) => "BatchNorm",
            LayerKind::Relu => "ReLU",
            LayerKind::Add => "Add",
            LayerKind::MaxPool(_) => "MaxPool",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Dense(_) => "Dense",
            LayerKind::Flatten => "Flatten",
            LayerKind::Softmax => "Softmax",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

/// One node of the graph. A layer's id is its index in [`ModelGraph::layers`].
/// An empty `inputs` list means "the model input" and is only legal on layer 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs,
        }
    }
}

/// An immutable, validated, topologically ordered model.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    output_shapes: Vec<Vec<usize>>,
    split_points: Vec<usize>,
    model_hash: u64,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && modelfile::save_model(self) == modelfile::save_model(other)
    }
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        checked_numel(&input_shape).map_err(|e| Error::InvalidGraph(e.to_string()))?;
        if layers.is_empty() {
            return Err(Error::InvalidGraph("model has no layers".into()));
        }
        if layers.len() > u16::MAX as usize - 1 {
            return Err(Error::InvalidGraph(format!("too many layers ({})", layers.len())));
        }
        let mut names = HashSet::new();
        for (id, layer) in layers.iter().enumerate() {
            if layer.name.is_empty() || !names.insert(layer.name.as_str()) {
                return Err(Error::InvalidGraph(format!(
                    "layer {id}: name '{}' is empty or duplicated",
                    layer.name
                )));
            }
            if id == 0 {
                if !layer.inputs.is_empty() {
                    return Err(Error::InvalidGraph(
                        "layer 0 must consume the model input".into(),
                    ));
                }
                if layer.kind.arity() != 1 {
                    return Err(Error::InvalidGraph("layer 0 cannot be an Add".into()));
                }
            } else {
                if layer.inputs.len() != layer.kind.arity() {
                    return Err(Error::InvalidGraph(format!(
                        "layer {id} ({}) needs {} input(s), has {}",
                        layer.kind.tag(),
                        layer.kind.arity(),
                        layer.inputs.len()
                    )));
                }
                if let Some(&bad) = layer.inputs.iter().find(|&&src| src >= id) {
                    return Err(Error::InvalidGraph(format!(
                        "layer {id} references layer {bad}, which is not earlier in topological order"
                    )));
                }
            }
        }

        let mut output_shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        for (id, layer) in layers.iter().enumerate() {
            let ins: Vec<&[usize]> = if layer.inputs.is_empty() {
                vec![input_shape.as_slice()]
            } else {
                layer.inputs.iter().map(|&i| output_shapes[i].as_slice()).collect()
            };
            let shape = infer_shape(&layer.kind, &ins)
                .map_err(|msg| Error::InvalidGraph(format!("layer {id} ({}): {msg}", layer.name)))?;
            output_shapes.push(shape);
        }

        let mut has_consumer = vec![false; layers.len()];
        for layer in &layers {
            for &src in &layer.inputs {
                has_consumer[src] = true;
            }
        }
        let terminals: Vec<usize> = (0..layers.len()).filter(|&i| !has_consumer[i]).collect();
        if terminals != [layers.len() - 1] {
            return Err(Error::InvalidGraph(format!(
                "expected exactly one terminal layer (the last), found {terminals:?}"
            )));
        }

        let split_points = compute_split_points(&layers);
        let mut graph = Self {
            input_shape,
            layers,
            output_shapes,
            split_points,
            model_hash: 0,
        };
        graph.model_hash = modelfile::compute_hash(&graph);
        Ok(graph)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> Option<&Layer> {
        self.layers.get(id)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn last_id(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_shape(&self, id: usize) -> &[usize] {
        &self.output_shapes[id]
    }

    pub fn output_elements(&self, id: usize) -> usize {
        self.output_shapes[id].iter().product()
    }

    pub fn input_elements(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// 64-bit FNV-1a digest of the canonical serialized form.
    pub fn model_hash(&self) -> u64 {
        self.model_hash
    }

    /// Layer ids whose output is the only tensor crossing the cut between
    /// `{0..=k}` and `{k+1..}`. Always includes the last layer.
    pub fn split_points(&self) -> &[usize] {
        &self.split_points
    }

    pub fn is_valid_split(&self, id: usize) -> bool {
        self.split_points.binary_search(&id).is_ok()
    }

    pub fn layer_id(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer { name: name.to_string() })
    }

    pub fn split_names(&self) -> Vec<&str> {
        self.split_points
            .iter()
            .map(|&k| self.layers[k].name.as_str())
            .collect()
    }

    /// Builds a new graph with the same input shape.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        Self::new(self.input_shape.clone(), layers)
    }

    pub fn batchnorms_at_init(&self) -> bool {
        self.layers.iter().any(|l| match &l.kind {
            LayerKind::BatchNorm(bn) => bn.is_at_init(),
            _ => false,
        })
    }
}

fn compute_split_points(layers: &[Layer]) -> Vec<usize> {
    // last_use[i] = highest consumer id of layer i's output.
    let mut last_use = vec![0usize; layers.len()];
    for (id, layer) in layers.iter().enumerate() {
        for &src in &layer.inputs {
            last_use[src] = last_use[src].max(id);
        }
    }
    // k is valid iff no layer i < k is consumed after k. Track the running
    // maximum of last_use over the prefix 0..k.
    let mut out = Vec::new();
    let mut reach = 0usize;
    for k in 0..layers.len() {
        if reach <= k {
            out.push(k);
        }
        reach = reach.max(last_use[k]);
    }
    out
}

fn infer_shape(kind: &LayerKind, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    let x = ins[0];
    let spatial = |what: &str| -> std::result::Result<(usize, usize, usize), String> {
        match *x {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(format!("{what} expects a [C,H,W] input, got {x:?}")),
        }
    };
    match kind {
        LayerKind::Conv2d(conv) => {
            let (c, h, w) = spatial("Conv2D")?;
            if c != conv.in_channels {
                return Err(format!("expects {} channels, got {c}", conv.in_channels));
            }
            if conv.stride == 0 || conv.kernel_h == 0 || conv.kernel_w == 0 || conv.out_channels == 0 {
                return Err("zero kernel, stride or channel count".into());
            }
            if conv.weights.len() != conv.weight_count() {
                return Err(format!(
                    "weight count {} does not match {}",
                    conv.weights.len(),
                    conv.weight_count()
                ));
            }
            let (ph, pw) = (h + 2 * conv.padding, w + 2 * conv.padding);
            if ph < conv.kernel_h || pw < conv.kernel_w {
                return Err("kernel larger than padded input".into());
            }
            Ok(vec![
                conv.out_channels,
                (ph - conv.kernel_h) / conv.stride + 1,
                (pw - conv.kernel_w) / conv.stride + 1,
            ])
        }
        LayerKind::BatchNorm(bn) => {
            let c = bn.channels();
            if x[0] != c || [&bn.beta, &bn.mean, &bn.var].iter().any(|v| v.len() != c) {
                return Err(format!("parameter sizes do not match {} channels", x[0]));
            }
            if !(bn.eps >= 0.0) || bn.var.iter().any(|&v| !(v + bn.eps > 0.0)) {
                return Err("variance + eps must be positive".into());
            }
            Ok(x.to_vec())
        }
        LayerKind::Relu | LayerKind::Softmax => Ok(x.to_vec()),
        LayerKind::Add => {
            if ins[0] != ins[1] {
                return Err(format!("Add operands differ: {:?} vs {:?}", ins[0], ins[1]));
            }
            Ok(x.to_vec())
        }
        LayerKind::MaxPool(pool) => {
            let (c, h, w) = spatial("MaxPool")?;
            if pool.kernel == 0 || pool.stride == 0 || h < pool.kernel || w < pool.kernel {
                return Err("invalid pooling window".into());
            }
            Ok(vec![c, (h - pool.kernel) / pool.stride + 1, (w - pool.kernel) / pool.stride + 1])
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = spatial("GlobalAvgPool")?;
            Ok(vec![c])
        }
        LayerKind::Dense(d) => {
            let n: usize = x.iter().product();
            if n != d.in_features {
                return Err(format!("expects {} features, got {n}", d.in_features));
            }
            if d.out_features == 0
                || d.weights.len() != d.in_features * d.out_features
                || d.bias.len() != d.out_features
            {
                return Err("weight or bias size mismatch".into());
            }
            Ok(vec![d.out_features])
        }
        LayerKind::Flatten => Ok(vec![x.iter().product()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu(name: &str, inputs: Vec<usize>) -> Layer {
        Layer::new(name, LayerKind::Relu, inputs)
    }

    #[test]
    fn residual_interior_is_not_a_split_point() {
        // 0 -> 1 -> 2 -> add(3: 0,2) -> 4
        let layers = vec![
            relu("a", vec![]),
            relu("b", vec![0]),
            relu("c", vec![1]),
            Layer::new("add", LayerKind::Add, vec![0, 2]),
            relu("out", vec![3]),
        ];
        let g = ModelGraph::new(vec![4], layers).unwrap();
        assert_eq!(g.split_points(), &[0, 3, 4]);
        assert!(!g.is_valid_split(1));
        assert!(!g.is_valid_split(2));
    }

    #[test]
    fn rejects_forward_references_and_multiple_terminals() {
        let fwd = vec![relu("a", vec![]), relu("b", vec![1])];
        assert!(ModelGraph::new(vec![2], fwd).is_err());
        let two_terminals = vec![relu("a", vec![]), relu("b", vec![0]), relu("c", vec![0])];
        assert!(ModelGraph::new(vec![2], two_terminals).is_err());
    }

    #[test]
    fn rejects_duplicate_names_and_bad_add() {
        let dup = vec![relu("a", vec![]), relu("a", vec![0])];
        assert!(ModelGraph::new(vec![2], dup).is_err());
        let one_input_add = vec![relu("a", vec![]), Layer::new("add", LayerKind::Add, vec![0])];
        assert!(ModelGraph::new(vec![2], one_input_add).is_err());
    }
}
