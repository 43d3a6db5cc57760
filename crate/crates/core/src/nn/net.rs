use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{elu, Param, Tape, Var};
use crate::error::{check_len, Error, Result};
use crate::prior::LatentGaussian;

/// Smallest standard deviation any gaussian head emits.
pub const MIN_STD: f64 = 1e-6;
/// Largest standard deviation any gaussian head emits.
pub const MAX_STD: f64 = 1e3;

pub fn log_std_bounds() -> (f64, f64) {
    (MIN_STD.ln(), MAX_STD.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Deterministic,
    /// The last layer emits `[mean | log_std]`, so the spread depends on the input.
    Gaussian,
    /// Mean from the last layer, log-std from a free parameter row.
    GaussianFreeStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

/// Fully connected network. `layer_sizes` lists input, hidden and output
/// widths; the activation is applied after every hidden layer only.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: OutputHead,
    layers: Vec<Linear>,
    log_std: Option<Param>,
}

/// Builder knobs for [`DenseNet::new`].
#[derive(Clone, Copy, Debug)]
pub struct InitSpec {
    pub hidden_gain: f64,
    pub output_gain: f64,
    pub initial_log_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            hidden_gain: std::f64::consts::SQRT_2,
            output_gain: 1.0,
            initial_log_std: 0.0,
        }
    }
}

/// Random matrix with orthonormal rows or columns (whichever is fewer),
/// scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let transpose = rows < cols;
    let (n, k) = if transpose { (cols, rows) } else { (rows, cols) };
    // k orthonormal vectors of length n via modified Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (i, j) = if transpose { (r, c) } else { (c, r) };
        gain * basis[i][j]
    })
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        head: OutputHead,
        init: InitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {layer_sizes:?}"
            )));
        }
        let out = *layer_sizes.last().unwrap();
        let n_layers = layer_sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            let last = i + 1 == n_layers;
            let width = if last && head == OutputHead::Gaussian {
                2 * pair[1]
            } else {
                pair[1]
            };
            let gain = if last { init.output_gain } else { init.hidden_gain };
            let mut weight = orthogonal(pair[0], width, gain, rng);
            let mut bias = Array2::zeros((1, width));
            if last && head == OutputHead::Gaussian {
                // the log-std half starts flat at the requested value
                weight.slice_mut(ndarray::s![.., out..]).fill(0.0);
                bias.slice_mut(ndarray::s![.., out..])
                    .fill(init.initial_log_std);
            }
            layers.push(Linear {
                weight: Param::new(format!("layer{i}.weight"), weight),
                bias: Param::new(format!("layer{i}.bias"), bias),
            });
        }
        let log_std = (head == OutputHead::GaussianFreeStd)
            .then(|| Param::new("log_std", Array2::from_elem((1, out), init.initial_log_std)));
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            head,
            layers,
            log_std,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn log_std_param(&self) -> Option<&Param> {
        self.log_std.as_ref()
    }

    pub fn log_std_param_mut(&mut self) -> Option<&mut Param> {
        self.log_std.as_mut()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        out.extend(self.log_std.iter());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.extend(self.log_std.iter_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Same weights under fresh parameter identities.
    pub fn duplicate(&self) -> Self {
        let mut copy = self.clone();
        for p in copy.params_mut() {
            *p = p.duplicate();
        }
        copy
    }

    /// Raw last-layer output for a batch (`B x input` rows).
    fn raw_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("network input", self.input_size(), input.ncols())?;
        let mut h: Array2<f64> = input.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight.value);
            h += &layer.bias.value;
            if i < last && self.activation != Activation::Identity {
                let act = self.activation;
                h.mapv_inplace(|x| act.apply(x));
            }
        }
        Ok(h)
    }

    /// Declared output for each row: the mean for gaussian heads.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let raw = self.raw_batch(input)?;
        Ok(match self.head {
            OutputHead::Gaussian => raw.slice(ndarray::s![.., ..self.output_size()]).to_owned(),
            _ => raw,
        })
    }

    /// `(mean, log_std)` per row; log-std is clamped to the std bounds.
    pub fn gaussian_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (lo, hi) = log_std_bounds();
        let raw = self.raw_batch(input)?;
        let d = self.output_size();
        match self.head {
            OutputHead::Deterministic => Err(Error::InvalidArgument(
                "network has a deterministic head".into(),
            )),
            OutputHead::Gaussian => {
                let mean = raw.slice(ndarray::s![.., ..d]).to_owned();
                let log_std = raw.slice(ndarray::s![.., d..]).mapv(|x| x.clamp(lo, hi));
                Ok((mean, log_std))
            }
            OutputHead::GaussianFreeStd => {
                let row = self.log_std.as_ref().expect("free log-std").value.mapv(|x| x.clamp(lo, hi));
                let log_std = row
                    .broadcast((raw.nrows(), d))
                    .expect("log-std broadcast")
                    .to_owned();
                Ok((raw, log_std))
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_gaussian(&self, input: &[f64]) -> Result<LatentGaussian> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let (mean, log_std) = self.gaussian_batch(x)?;
        Ok(LatentGaussian::from_parts(
            mean.into_raw_vec_and_offset().0,
            log_std.mapv(f64::exp).into_raw_vec_and_offset().0,
        ))
    }

    fn raw_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        check_len("network input", self.input_size(), tape.value(input).ncols())?;
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&layer.weight);
            let b = tape.param(&layer.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last && self.activation == Activation::Elu {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Recorded forward pass producing the declared output (mean for gaussian heads).
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let raw = self.raw_tape(tape, input)?;
        match self.head {
            OutputHead::Gaussian => tape.cols(raw, 0, self.output_size()),
            _ => Ok(raw),
        }
    }

    /// Recorded forward pass producing `(mean, log_std)` with the log-std clamp applied.
    pub fn gaussian_tape(&self, tape: &mut Tape, input: Var) -> Result<(Var, Var)> {
        let (lo, hi) = log_std_bounds();
        let rows = tape.value(input).nrows();
        let raw = self.raw_tape(tape, input)?;
        let d = self.output_size();
        match self.head {
            OutputHead::Deterministic => Err(Error::InvalidArgument(
                "network has a deterministic head".into(),
            )),
            OutputHead::Gaussian => {
                let mean = tape.cols(raw, 0, d)?;
                let ls = tape.cols(raw, d, 2 * d)?;
                Ok((mean, tape.clamp(ls, lo, hi)))
            }
            OutputHead::GaussianFreeStd => {
                let row = tape.param(self.log_std.as_ref().expect("free log-std"));
                let ls = tape.broadcast_rows(row, rows);
                Ok((raw, tape.clamp(ls, lo, hi)))
            }
        }
    }

    /// Serializes to the versioned JSON parameter format.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: NetRecord = serde_json::from_str(text)?;
        rec.try_into()
    }

    /// Same record as [`DenseNet::to_json`], for embedding in larger files.
    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(NetRecord::from(self))?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let rec: NetRecord = serde_json::from_value(value)?;
        rec.try_into()
    }
}

pub const NET_FORMAT: &str = "latentmimic.dense_net";
pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Array2<f64>> for MatrixRecord {
    fn from(a: &Array2<f64>) -> Self {
        MatrixRecord {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }
}

impl MatrixRecord {
    fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::InvalidArgument(format!("matrix record: {e}")))
    }
}

/// On-disk network layout: a header with the layer sizes followed by the
/// row-major parameter matrices.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRecord {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: OutputHead,
    weights: Vec<MatrixRecord>,
    biases: Vec<MatrixRecord>,
    log_std: Option<MatrixRecord>,
}

impl From<&DenseNet> for NetRecord {
    fn from(net: &DenseNet) -> Self {
        NetRecord {
            format: NET_FORMAT.into(),
            version: NET_FORMAT_VERSION,
            layer_sizes: net.layer_sizes.clone(),
            activation: net.activation,
            head: net.head,
            weights: net.layers.iter().map(|l| (&l.weight.value).into()).collect(),
            biases: net.layers.iter().map(|l| (&l.bias.value).into()).collect(),
            log_std: net.log_std.as_ref().map(|p| (&p.value).into()),
        }
    }
}

impl TryFrom<NetRecord> for DenseNet {
    type Error = Error;

    fn try_from(rec: NetRecord) -> Result<Self> {
        if rec.format != NET_FORMAT || rec.version != NET_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported network format {} v{}",
                rec.format, rec.version
            )));
        }
        let n = rec.layer_sizes.len().saturating_sub(1);
        if n == 0 || rec.weights.len() != n || rec.biases.len() != n {
            return Err(Error::InvalidArgument("layer count does not match header".into()));
        }
        let out = *rec.layer_sizes.last().unwrap();
        let mut layers = Vec::with_capacity(n);
        for (i, (w, b)) in rec.weights.into_iter().zip(rec.biases).enumerate() {
            let w = w.into_array()?;
            let b = b.into_array()?;
            let width = if i + 1 == n && rec.head == OutputHead::Gaussian {
                2 * rec.layer_sizes[i + 1]
            } else {
                rec.layer_sizes[i + 1]
            };
            check_len("stored weight rows", rec.layer_sizes[i], w.nrows())?;
            check_len("stored weight cols", width, w.ncols())?;
            check_len("stored bias", width, b.len())?;
            layers.push(Linear {
                weight: Param::new(format!("layer{i}.weight"), w),
                bias: Param::new(format!("layer{i}.bias"), b),
            });
        }
        let log_std = match (rec.head, rec.log_std) {
            (OutputHead::GaussianFreeStd, Some(m)) => {
                let m = m.into_array()?;
                check_len("stored log_std", out, m.len())?;
                Some(Param::new("log_std", m))
            }
            (OutputHead::GaussianFreeStd, None) => {
                return Err(Error::InvalidArgument("missing log_std row".into()))
            }
            _ => None,
        };
        Ok(DenseNet {
            layer_sizes: rec.layer_sizes,
            activation: rec.activation,
            head: rec.head,
            layers,
            log_std,
        })
    }
}

/// Column-stacks rows of equal length into a `B x n` matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let n = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((rows.len(), n));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((elu(-1.0) + 0.63212).abs() < 1e-5);
        assert_eq!(elu(2.5), 2.5);
    }

    #[test]
    fn identity_network() {
        let mut net = DenseNet::new(
            &[3, 3],
            Activation::Identity,
            OutputHead::Deterministic,
            InitSpec::default(),
            &mut rng(),
        )
        .unwrap();
        net.layers[0].weight.value = Array2::eye(3);
        let x = [0.5, -2.0, 7.25];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hidden_units_fed_zero_stay_zero() {
        let mut net = DenseNet::new(
            &[2, 4, 1],
            Activation::Elu,
            OutputHead::Deterministic,
            InitSpec::default(),
            &mut rng(),
        )
        .unwrap();
        // hidden pre-activations: 0 and -1; output sums the hidden layer
        net.layers[0].weight.value = Array2::zeros((2, 4));
        net.layers[0].bias.value = ndarray::array![[0.0, 0.0, -1.0, 0.0]];
        net.layers[1].weight.value = Array2::ones((4, 1));
        let y = net.forward(&[1.0, 1.0]).unwrap();
        assert!((y[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = DenseNet::new(
            &[4, 8, 2],
            Activation::Elu,
            OutputHead::Deterministic,
            InitSpec::default(),
            &mut rng(),
        )
        .unwrap();
        assert!(matches!(net.forward(&[1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn output_has_declared_size() {
        for head in [OutputHead::Deterministic, OutputHead::Gaussian, OutputHead::GaussianFreeStd] {
            let net = DenseNet::new(&[5, 7, 3], Activation::Elu, head, InitSpec::default(), &mut rng()).unwrap();
            assert_eq!(net.forward(&[0.1; 5]).unwrap().len(), 3);
            if head != OutputHead::Deterministic {
                let g = net.forward_gaussian(&[0.1; 5]).unwrap();
                assert_eq!(g.dim(), 3);
                assert!(g.std().iter().all(|s| *s > 0.0));
            }
        }
    }

    #[test]
    fn std_floor_holds_for_extreme_log_std() {
        let mut net = DenseNet::new(
            &[2, 2],
            Activation::Elu,
            OutputHead::Gaussian,
            InitSpec::default(),
            &mut rng(),
        )
        .unwrap();
        net.layers[0].bias.value = ndarray::array![[0.0, 0.0, -1e4, 1e4]];
        let g = net.forward_gaussian(&[0.0, 0.0]).unwrap();
        assert!((g.std()[0] - MIN_STD).abs() < 1e-18);
        assert!((g.std()[1] - MAX_STD).abs() < 1e-9);
        assert!(g.log_density(&[1e3, -1e3]).is_finite());
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let w = orthogonal(6, 4, 1.0, &mut rng());
        let g = w.t().dot(&w);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        for head in [OutputHead::Deterministic, OutputHead::Gaussian, OutputHead::GaussianFreeStd] {
            let net = DenseNet::new(&[4, 8, 2], Activation::Elu, head, InitSpec::default(), &mut rng()).unwrap();
            let back = DenseNet::from_json(&net.to_json().unwrap()).unwrap();
            assert_eq!(net, back);
        }
    }

    #[test]
    fn wrong_format_rejected() {
        let net = DenseNet::new(&[2, 2], Activation::Elu, OutputHead::Deterministic, InitSpec::default(), &mut rng()).unwrap();
        let text = net.to_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(DenseNet::from_json(&text).is_err());
    }
}
