//! Reverse-mode automatic differentiation on an operation tape.
//!
//! A `Graph` records one forward computation as a flat list of nodes; values
//! are computed eagerly at node creation, so any intermediate can be read
//! immediately. `backward` walks the tape in reverse and accumulates
//! gradients, which `harvest_grads` then adds onto the bound parameters in a
//! `ParamStore`. A graph is built fresh for every training step; parameters
//! persist in the store across steps.
//!
//! Every operation validates shapes up front and checks its output for
//! non-finite values, so a NaN is reported at the operation that produced it
//! rather than surfacing later as a corrupted loss.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore};

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    /// Row-broadcast add: matrix [R x C] + vector [C].
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    /// Softmax over the trailing axis.
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// L2-normalize each row; forward errors on zero-norm rows.
    NormalizeRows(usize),
    /// Row gather from an embedding table.
    Gather { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatRows(usize, usize),
    ConcatCols(Vec<usize>),
    /// Stack rank-1 vectors into a matrix, one per row.
    StackRows(Vec<usize>),
    /// Extract one row of a matrix as a rank-1 vector.
    Row(usize, usize),
    Reshape(usize),
    MeanAll(usize),
    SumAll(usize),
    /// Contrastive batch loss over a similarity matrix; see `Graph::nce_loss`.
    Nce { sim: usize, tau: f64 },
    /// Bidirectional max-margin loss; see `Graph::triplet_loss`.
    Triplet { sim: usize, margin: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Rows/cols of a rank-2 shape; vectors count as a single row.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape.iter().take(shape.len() - 1).product(), shape[shape.len() - 1]),
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, what: &str) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} produced by {what}"
            )));
        }
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "leaf shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        self.push(Op::Leaf, shape.to_vec(), data, false, "leaf")
    }

    /// Binds a stored parameter into this graph. The node copies the current
    /// values; `harvest_grads` routes gradients back to the store. Frozen
    /// parameters (requires_grad = false) enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(
            Op::Param(id),
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            "param",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.0, b.0), shape, data, ng, "add")
    }

    /// Matrix [R x C] plus vector [C], broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = as_2d(&self.nodes[a.0].shape);
        if self.nodes[b.0].shape != [c] {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} vs vector {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[b.0].data[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::AddRow(a.0, b.0), shape, data, ng, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a.0, b.0), shape, data, ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Scale(a.0, c), shape, data, ng, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            // i-k-j order: the inner loop runs over contiguous rows of b and
            // out, which the compiler vectorizes.
            for i in 0..m {
                let out_row = i * n;
                for kk in 0..k {
                    let aik = da[i * k + kk];
                    let b_row = kk * n;
                    for j in 0..n {
                        data[out_row + j] += aik * db[b_row + j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a.0, b.0), vec![m, n], data, ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose: rank-2 required, got {:?}", sa)));
        }
        let (r, c) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = da[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose(a.0), vec![c, r], data, ng, "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Relu(a.0), shape, data, ng, "relu")
    }

    /// Softmax over the trailing axis with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_2d(&self.nodes[a.0].shape);
        if c == 0 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let da = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &da[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a.0), shape, data, ng, "softmax")
    }

    /// Temperature-scaled softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let scaled = self.scale(a, 1.0 / temperature)?;
        self.softmax_rows(scaled)
    }

    /// Per-slice normalization over the trailing axis, then affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = as_2d(&self.nodes[x.0].shape);
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: x trailing dim {} vs gamma {:?} / beta {:?}",
                c, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let dx = &self.nodes[x.0].data;
        let dg = &self.nodes[gamma.0].data;
        let db = &self.nodes[beta.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &dx[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * dg[j] + db[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            shape,
            data,
            ng,
            "layer_norm",
        )
    }

    /// L2-normalizes each row. A zero-norm row is a numeric error naming the
    /// row, because downstream cosine similarities would be undefined.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_2d(&self.nodes[a.0].shape);
        let da = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &da[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!("zero-norm row {i} in normalize_rows")));
            }
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::NormalizeRows(a.0), shape, data, ng, "normalize_rows")
    }

    /// Gathers rows of an embedding table: output row k = table[ids[k]].
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(Error::Shape(format!("gather_rows: table must be rank-2, got {:?}", st)));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Corpus(format!(
                "token id {bad} out of range for table with {v} rows"
            )));
        }
        let dt = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&dt[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            Op::Gather { table: table.0, ids: ids.to_vec() },
            vec![ids.len(), d],
            data,
            ng,
            "gather_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || start + len > sx[0] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} of {:?}",
                start + len,
                sx
            )));
        }
        let c = sx[1];
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(Op::SliceRows { x: x.0, start, len }, vec![len, c], data, ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || start + len > sx[1] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols: cols {start}..{} of {:?}",
                start + len,
                sx
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let dx = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&dx[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols { x: x.0, start, len }, vec![r, len], data, ng, "slice_cols")
    }

    /// Stacks two matrices vertically: [Na x C] over [Nb x C].
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!("concat_rows: {:?} over {:?}", sa, sb)));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a.0, b.0), shape, data, ng, "concat_rows")
    }

    /// Joins matrices side by side; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let r = self.nodes[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 2 || sp[0] != r {
                return Err(Error::Shape(format!("concat_cols: incompatible part {:?}", sp)));
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                let dp = &self.nodes[p.0].data;
                data.extend_from_slice(&dp[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatCols(ids), vec![r, total], data, ng, "concat_cols")
    }

    /// Stacks rank-1 vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Usage("stack_rows of zero rows".into()));
        }
        let c = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for v in rows {
            let n = &self.nodes[v.0];
            if n.shape.len() != 1 || n.data.len() != c {
                return Err(Error::Shape(format!(
                    "stack_rows: want vectors of length {c}, got {:?}",
                    n.shape
                )));
            }
            data.extend_from_slice(&n.data);
        }
        let ng = rows.iter().any(|v| self.needs(*v));
        let ids: Vec<usize> = rows.iter().map(|v| v.0).collect();
        self.push(Op::StackRows(ids), vec![rows.len(), c], data, ng, "stack_rows")
    }

    /// Extracts row `i` of a matrix as a rank-1 vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || i >= sx[0] {
            return Err(Error::Shape(format!("row {i} of {:?}", sx)));
        }
        let c = sx[1];
        let data = self.nodes[x.0].data[i * c..(i + 1) * c].to_vec();
        let ng = self.needs(x);
        self.push(Op::Row(x.0, i), vec![c], data, ng, "row")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        self.push(Op::Reshape(x.0), shape.to_vec(), data, ng, "reshape")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let v = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let ng = self.needs(x);
        self.push(Op::MeanAll(x.0), vec![1], vec![v], ng, "mean_all")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].data.iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(Op::SumAll(x.0), vec![1], vec![v], ng, "sum_all")
    }

    /// Contrastive loss over a B x B similarity matrix where matched pairs sit
    /// on the diagonal. For each anchor i the denominator pools the positive
    /// with both in-batch negative directions:
    ///
    ///   l_i = exp(S_ii/t) / (exp(S_ii/t) + sum_{j!=i} exp(S_ij/t) + sum_{j!=i} exp(S_ji/t))
    ///   loss = -(1/B) * sum_i ln l_i
    ///
    /// Computed with max-subtraction so small temperatures stay stable. The
    /// loss is nonnegative and is exactly zero only for B = 1.
    pub fn nce_loss(&mut self, sim: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("nce temperature must be positive, got {tau}")));
        }
        let s = &self.nodes[sim.0].shape;
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::Shape(format!("nce_loss: square matrix required, got {:?}", s)));
        }
        let b = s[0];
        let d = &self.nodes[sim.0].data;
        let mut total = 0.0;
        for i in 0..b {
            let mut terms = Vec::with_capacity(2 * b - 1);
            for j in 0..b {
                terms.push(d[i * b + j] / tau);
            }
            for j in 0..b {
                if j != i {
                    terms.push(d[j * b + i] / tau);
                }
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            total += lse - d[i * b + i] / tau;
        }
        let ng = self.needs(sim);
        self.push(Op::Nce { sim: sim.0, tau }, vec![1], vec![total / b as f64], ng, "nce_loss")
    }

    /// Bidirectional max-margin loss over a similarity matrix, all in-batch
    /// negatives:
    ///
    ///   loss = (1/B) * sum_i sum_{j!=i} [ max(0, m - S_ii + S_ij)
    ///                                   + max(0, m - S_ii + S_ji) ]
    pub fn triplet_loss(&mut self, sim: Var, margin: f64) -> Result<Var> {
        if margin < 0.0 {
            return Err(Error::Config(format!("triplet margin must be nonnegative, got {margin}")));
        }
        let s = &self.nodes[sim.0].shape;
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::Shape(format!("triplet_loss: square matrix required, got {:?}", s)));
        }
        let b = s[0];
        let d = &self.nodes[sim.0].data;
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if j != i {
                    total += (margin - d[i * b + i] + d[i * b + j]).max(0.0);
                    total += (margin - d[i * b + i] + d[j * b + i]).max(0.0);
                }
            }
        }
        let ng = self.needs(sim);
        self.push(
            Op::Triplet { sim: sim.0, margin },
            vec![1],
            vec![total / b as f64],
            ng,
            "triplet_loss",
        )
    }

    /// Inverted-dropout mask: in training mode each element is zeroed with
    /// probability `rate` and survivors scale by 1/(1-rate); in inference the
    /// input passes through untouched (the same `Var`, no new node).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].data.len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let m = self.leaf(&shape, mask)?;
        self.mul(x, m)
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates gradients down the tape.
    /// Each call contributes one full pass into the persistent node
    /// gradients, so repeated calls without zeroing accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        if !ln.data[0].is_finite() {
            return Err(Error::Numeric("backward on non-finite loss".into()));
        }
        if !ln.needs_grad {
            return Ok(()); // nothing trainable below the loss
        }
        // Per-call workspace, folded into node grads as each node finishes.
        let mut work: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = work[idx].take() else { continue };
            self.propagate(idx, &g, &mut work);
            let len = self.nodes[idx].data.len();
            let buf = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; len]);
            for (b, &v) in buf.iter_mut().zip(&g) {
                *b += v;
            }
        }
        Ok(())
    }

    fn add_work(&self, node: usize, g: Vec<f64>, work: &mut [Option<Vec<f64>>]) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut work[node] {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.add_work(*a, g.to_vec(), work);
                self.add_work(*b, g.to_vec(), work);
            }
            Op::AddRow(a, b) => {
                let (r, c) = as_2d(&self.nodes[*a].shape);
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
                self.add_work(*a, g.to_vec(), work);
                self.add_work(*b, gb, work);
            }
            Op::Mul(a, b) => {
                let da = &self.nodes[*a].data;
                let db = &self.nodes[*b].data;
                let ga: Vec<f64> = g.iter().zip(db).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(da).map(|(x, y)| x * y).collect();
                self.add_work(*a, ga, work);
                self.add_work(*b, gb, work);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_work(*a, ga, work);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let da = &self.nodes[*a].data;
                let db = &self.nodes[*b].data;
                // dA = G * B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for kk in 0..k {
                            ga[i * k + kk] += gij * db[kk * n + j];
                        }
                    }
                }
                // dB = A^T * G
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = da[i * k + kk];
                        for j in 0..n {
                            gb[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                self.add_work(*a, ga, work);
                self.add_work(*b, gb, work);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.add_work(*a, ga, work);
            }
            Op::Relu(a) => {
                let da = &self.nodes[*a].data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(da)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_work(*a, ga, work);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = as_2d(&self.nodes[*a].shape);
                let y = &self.nodes[idx].data;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                self.add_work(*a, ga, work);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = as_2d(&self.nodes[*x].shape);
                let dx = &self.nodes[*x].data;
                let dgm = &self.nodes[*gamma].data;
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let row = &dx[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + *eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gr = &g[i * c..(i + 1) * c];
                    let gh: Vec<f64> = (0..c).map(|j| gr[j] * dgm[j]).collect();
                    let mean_gh = gh.iter().sum::<f64>() / c as f64;
                    let mean_ghx = (0..c).map(|j| gh[j] * xhat[j]).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = (gh[j] - mean_gh - xhat[j] * mean_ghx) * inv;
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                }
                self.add_work(*x, gx, work);
                self.add_work(*gamma, gg, work);
                self.add_work(*beta, gb, work);
            }
            Op::NormalizeRows(a) => {
                let (r, c) = as_2d(&self.nodes[*a].shape);
                let da = &self.nodes[*a].data;
                let y = &self.nodes[idx].data;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let norm = da[i * c..(i + 1) * c]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        ga[i * c + j] = (g[i * c + j] - dot * y[i * c + j]) / norm;
                    }
                }
                self.add_work(*a, ga, work);
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let mut gt = vec![0.0; self.nodes[*table].data.len()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[k * d + j];
                    }
                }
                self.add_work(*table, gt, work);
            }
            Op::SliceRows { x, start, len } => {
                let c = self.nodes[*x].shape[1];
                let mut gx = vec![0.0; self.nodes[*x].data.len()];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                self.add_work(*x, gx, work);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        gx[i * c + start + j] = g[i * len + j];
                    }
                }
                self.add_work(*x, gx, work);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].data.len();
                self.add_work(*a, g[..na].to_vec(), work);
                self.add_work(*b, g[na..].to_vec(), work);
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[idx].shape[0];
                let total = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.add_work(p, gp, work);
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let c = self.nodes[idx].shape[1];
                for (k, &r) in rows.iter().enumerate() {
                    self.add_work(r, g[k * c..(k + 1) * c].to_vec(), work);
                }
            }
            Op::Row(x, i) => {
                let c = self.nodes[*x].shape[1];
                let mut gx = vec![0.0; self.nodes[*x].data.len()];
                gx[i * c..(i + 1) * c].copy_from_slice(g);
                self.add_work(*x, gx, work);
            }
            Op::Reshape(x) => self.add_work(*x, g.to_vec(), work),
            Op::MeanAll(x) => {
                let n = self.nodes[*x].data.len();
                self.add_work(*x, vec![g[0] / n as f64; n], work);
            }
            Op::SumAll(x) => {
                let n = self.nodes[*x].data.len();
                self.add_work(*x, vec![g[0]; n], work);
            }
            Op::Nce { sim, tau } => {
                let b = self.nodes[*sim].shape[0];
                let d = &self.nodes[*sim].data;
                let scale = g[0] / (b as f64 * tau);
                let mut gs = vec![0.0; b * b];
                for i in 0..b {
                    let mut terms = Vec::with_capacity(2 * b - 1);
                    for j in 0..b {
                        terms.push(d[i * b + j] / tau);
                    }
                    for j in 0..b {
                        if j != i {
                            terms.push(d[j * b + i] / tau);
                        }
                    }
                    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
                    // Row-direction terms: entries (i, j) for all j.
                    for j in 0..b {
                        let p = (d[i * b + j] / tau - m).exp() / sum;
                        gs[i * b + j] += p * scale;
                    }
                    // Column-direction terms: entries (j, i) for j != i.
                    for j in 0..b {
                        if j != i {
                            let p = (d[j * b + i] / tau - m).exp() / sum;
                            gs[j * b + i] += p * scale;
                        }
                    }
                    // The positive appears once in the numerator.
                    gs[i * b + i] -= scale;
                }
                self.add_work(*sim, gs, work);
            }
            Op::Triplet { sim, margin } => {
                let b = self.nodes[*sim].shape[0];
                let d = &self.nodes[*sim].data;
                let scale = g[0] / b as f64;
                let mut gs = vec![0.0; b * b];
                for i in 0..b {
                    for j in 0..b {
                        if j != i {
                            if margin - d[i * b + i] + d[i * b + j] > 0.0 {
                                gs[i * b + i] -= scale;
                                gs[i * b + j] += scale;
                            }
                            if margin - d[i * b + i] + d[j * b + i] > 0.0 {
                                gs[i * b + i] -= scale;
                                gs[j * b + i] += scale;
                            }
                        }
                    }
                }
                self.add_work(*sim, gs, work);
            }
        }
    }

    /// Adds every bound parameter's tape gradient onto its store tensor.
    pub fn harvest_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if node.needs_grad {
                    if let Some(g) = &node.grad {
                        store.get_mut(id).accumulate_grad(g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Projection parameters for one attention block, already bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Standard multi-head scaled dot-product attention.
///
/// query: [Nq x D], key/value: [Nk x D]. Each of the `heads` slices attends
/// with 1/sqrt(D/heads) scaling; head outputs are concatenated and passed
/// through the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let d = g.shape(query)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    if g.shape(key)[0] != g.shape(value)[0] {
        return Err(Error::Shape("attention key/value row mismatch".into()));
    }
    if g.shape(query)[0] == 0 {
        return Err(Error::Usage("attention with empty query".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = g.matmul(query, p.wq)?;
    let q = g.add_row(q, p.bq)?;
    let k = g.matmul(key, p.wk)?;
    let k = g.add_row(k, p.bk)?;
    let v = g.matmul(value, p.wv)?;
    let v = g.add_row(v, p.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let weights = g.softmax_rows(logits)?;
        head_outs.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat_cols(&head_outs)?;
    let out = g.matmul(joined, p.wo)?;
    g.add_row(out, p.bo)
}
