//! Encoder trunks and binary heads.
//!
//! Encoders map `d` input features through two ReLU layers of width 64 and
//! 32. Heads are a single linear layer from the 32-wide representation to one
//! logit, squashed by a sigmoid. Two independent encoders exist in a full run:
//! one feeding the attribute predictor and domain classifier, one feeding the
//! label predictor and bias adversary.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Hidden widths of every encoder trunk.
pub const HIDDEN_WIDTHS: [usize; 2] = [64, 32];
/// Width of the representation produced by an encoder.
pub const REPR_WIDTH: usize = 32;

const CHECKPOINT_MAGIC: &str = "fairda-mlp 1";

pub fn encoder_sizes(input_dim: usize) -> Vec<usize> {
    vec![input_dim, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1]]
}

pub fn head_sizes() -> Vec<usize> {
    vec![REPR_WIDTH, 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights and biases of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Graph handles for one binding of an [`MlpParams`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    sizes: Vec<usize>,
}

/// Output of an encoder inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Representation {
    pub z: Var,
    pub width: usize,
}

/// Glorot-uniform weights, zero biases, reproducible from `seed`.
pub fn init_mlp(sizes: &[usize], seed: u64) -> Result<MlpParams> {
    MlpParams::init(sizes, &mut seeded_rng(seed, 0))
}

impl MlpParams {
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::new(Matrix::new(fan_in, fan_out, values).expect("sized")),
                    bias: Tensor::new(Matrix::zeros(1, fan_out)),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// All-zero parameters; useful as a neutral starting point in tests.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::new(Matrix::zeros(w[0], w[1])),
                bias: Tensor::new(Matrix::zeros(1, w[1])),
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Every trainable tensor, weights before biases within each layer.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.value.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| (g.param(&l.weight), g.param(&l.bias)))
            .collect();
        BoundMlp {
            vars,
            sizes: self.sizes.clone(),
        }
    }

    /// Adds the gradients reached by the last backward pass into `self`.
    pub fn collect_grads(&mut self, g: &Graph, bound: &BoundMlp) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            g.accumulate_into(w, &mut layer.weight)?;
            g.accumulate_into(b, &mut layer.bias)?;
        }
        Ok(())
    }

    /// Writes a textual checkpoint. Values use the shortest decimal form that
    /// parses back to the same bits.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        writeln!(w, "sizes {}", sizes.join(" "))?;
        for (i, layer) in self.layers.iter().enumerate() {
            write_matrix(w, &format!("layer {i} weight"), &layer.weight.value)?;
            write_matrix(w, &format!("layer {i} bias"), &layer.bias.value)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = LineReader { inner: r };
        let magic = lines.next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint header {magic:?}")));
        }
        let sizes_line = lines.next_line()?;
        let sizes = sizes_line
            .strip_prefix("sizes ")
            .ok_or_else(|| Error::Format("missing sizes line".into()))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes).map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, w) in sizes.windows(2).enumerate() {
            let weight = read_matrix(&mut lines, &format!("layer {i} weight"), w[0], w[1])?;
            let bias = read_matrix(&mut lines, &format!("layer {i} bias"), 1, w[1])?;
            layers.push(Layer {
                weight: Tensor::new(weight),
                bias: Tensor::new(bias),
            });
        }
        Ok(Self { sizes, layers })
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Contract(
            "an MLP needs an input size and at least one layer".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::Contract(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

fn write_matrix<W: Write>(w: &mut W, tag: &str, m: &Matrix) -> std::io::Result<()> {
    writeln!(w, "{tag} {} {}", m.rows(), m.cols())?;
    for r in 0..m.rows() {
        let row: Vec<String> = m.row_slice(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

struct LineReader<'a, R> {
    inner: &'a mut R,
}

impl<R: BufRead> LineReader<'_, R> {
    fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self
            .inner
            .read_line(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        Ok(buf.trim_end().to_string())
    }
}

fn read_matrix<R: BufRead>(
    lines: &mut LineReader<'_, R>,
    tag: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    let header = lines.next_line()?;
    let expected = format!("{tag} {rows} {cols}");
    if header != expected {
        return Err(Error::Format(format!(
            "expected {expected:?}, found {header:?}"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next_line()?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| Error::Format(format!("{tok:?}: {e}")))?,
            );
        }
        if data.len() - before != cols {
            return Err(Error::Format(format!("{tag}: row has wrong arity")));
        }
    }
    Matrix::new(rows, cols, data)
}

impl BoundMlp {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn affine(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let (w, b) = self.vars[layer];
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Runs an encoder: ReLU after every affine layer.
pub fn encode(g: &mut Graph, enc: &BoundMlp, x: Var) -> Result<Representation> {
    let cols = g.value(x).cols();
    if cols != enc.input_dim() {
        return Err(Error::Shape {
            op: "encode",
            left: g.value(x).shape(),
            right: (enc.input_dim(), *enc.sizes.last().expect("validated")),
        });
    }
    let mut h = x;
    for layer in 0..enc.vars.len() {
        let a = enc.affine(g, layer, h)?;
        h = g.relu(a);
    }
    Ok(Representation {
        z: h,
        width: *enc.sizes.last().expect("validated"),
    })
}

/// Runs a head on a representation (or any graph node of matching width) and
/// returns per-row probabilities. Hidden head layers, if any, use ReLU.
pub fn head_prob(g: &mut Graph, head: &BoundMlp, z: Var) -> Result<Var> {
    let cols = g.value(z).cols();
    if cols != head.input_dim() {
        return Err(Error::Shape {
            op: "head_prob",
            left: g.value(z).shape(),
            right: (head.input_dim(), 1),
        });
    }
    let n = head.vars.len();
    let mut h = z;
    for layer in 0..n {
        let a = head.affine(g, layer, h)?;
        h = if layer + 1 < n { g.relu(a) } else { g.sigmoid(a) };
    }
    Ok(h)
}

/// 1 where `p >= threshold`, else 0.
pub fn hard_label(p: &[f64], threshold: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Forward-only evaluation of `head(encoder(x))`.
pub fn infer_probs(encoder: &MlpParams, head: &MlpParams, x: &Matrix) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let e = encoder.bind(&mut g);
    let h = head.bind(&mut g);
    let xv = g.constant(x.clone());
    let r = encode(&mut g, &e, xv)?;
    let p = head_prob(&mut g, &h, r.z)?;
    Ok(g.value(p).data().to_vec())
}

/// Forward-only evaluation of the encoder alone.
pub fn infer_repr(encoder: &MlpParams, x: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let e = encoder.bind(&mut g);
    let xv = g.constant(x.clone());
    let r = encode(&mut g, &e, xv)?;
    Ok(g.value(r.z).clone())
}
