use crate::encoder::{attention, block_matrix_name, validate_tokens, ModelConfig, ParameterSet, BLOCK_MATRIX_ROLES};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::{gelu, layernorm, ops, Tensor};

/// Compressed-row storage of a masked weight matrix `[rows × cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assembles a matrix from raw parts, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Row pointers start at 0, are nondecreasing and end at nnz; column
    /// indices are in range and strictly increasing within each row.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Malformed(format!("sparse matrix: {msg}")));
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[0] != 0 {
            return bad("row pointer array has the wrong length or origin".into());
        }
        if self.col_idx.len() != self.values.len() || self.row_ptr[self.rows] != self.values.len() {
            return bad("nonzero count disagrees with row pointers".into());
        }
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if a > b {
                return bad(format!("row pointers decrease at row {r}"));
            }
            let idx = &self.col_idx[a..b];
            if idx.iter().any(|&c| c >= self.cols) || idx.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("column indices of row {r} out of range or not increasing"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> Tensor {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[r * self.cols + self.col_idx[p]] = self.values[p];
            }
        }
        Tensor::new(vec![self.rows, self.cols], d).expect("dims")
    }
}

/// Keeps exactly the entries of `w` where `mask` is one.
pub fn to_sparse(w: &Tensor, mask: &Tensor) -> Result<SparseMatrix> {
    if w.shape() != mask.shape() {
        return Err(Error::shape("to_sparse", w.shape(), mask.shape()));
    }
    let (rows, cols) = w
        .matrix_dims()
        .ok_or_else(|| Error::shape("to_sparse", w.shape(), &[]))?;
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let (mut col_idx, mut values) = (Vec::new(), Vec::new());
    row_ptr.push(0);
    for r in 0..rows {
        for c in 0..cols {
            if mask.data()[r * cols + c] != 0.0 {
                col_idx.push(c);
                values.push(w.data()[r * cols + c]);
            }
        }
        row_ptr.push(values.len());
    }
    Ok(SparseMatrix {
        rows,
        cols,
        row_ptr,
        col_idx,
        values,
    })
}

/// Dense matrix as a sparse one with every entry stored.
pub fn dense_to_sparse(w: &Tensor) -> Result<SparseMatrix> {
    to_sparse(w, &Tensor::ones(w.shape()))
}

/// `y = x · W` for a row vector `x`, accumulating over rows of `W` in
/// ascending order (the dense kernel's order). Returns `y` and the number of
/// multiplications performed.
pub fn sparse_matvec(m: &SparseMatrix, x: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.len() != m.rows {
        return Err(Error::shape("sparse_matvec", &[x.len()], &[m.rows, m.cols]));
    }
    let mut y = vec![0.0; m.cols];
    for (r, &xv) in x.iter().enumerate() {
        for p in m.row_ptr[r]..m.row_ptr[r + 1] {
            y[m.col_idx[p]] += xv * m.values[p];
        }
    }
    Ok((y, m.nnz()))
}

/// `X · W` row by row.
pub fn sparse_matmul(x: &Tensor, m: &SparseMatrix) -> Result<(Tensor, usize)> {
    let (s, k) = x
        .matrix_dims()
        .ok_or_else(|| Error::shape("sparse_matmul", x.shape(), &[]))?;
    if k != m.rows {
        return Err(Error::shape("sparse_matmul", x.shape(), &[m.rows, m.cols]));
    }
    let mut out = Vec::with_capacity(s * m.cols);
    let mut count = 0;
    for i in 0..s {
        let (y, c) = sparse_matvec(m, x.row(i))?;
        out.extend(y);
        count += c;
    }
    Ok((Tensor::new(vec![s, m.cols], out)?, count))
}

/// A model whose six block matrices per block are stored sparsely; the
/// remaining tensors stay dense (with `embed.word` masked if the mask covers
/// it). Immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct SparseModel {
    config: ModelConfig,
    dense: ParameterSet,
    blocks: Vec<[SparseMatrix; 6]>,
}

/// Output of [`sparse_encode`] with operation counts for the block matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOutput {
    pub pooled: Tensor,
    /// Multiplications spent in the block matrices.
    pub multiplies: usize,
    /// Multiplications the dense computation spends in the same matrices.
    pub dense_multiplies: usize,
}

impl SparseOutput {
    pub fn multiply_ratio(&self) -> f64 {
        self.multiplies as f64 / self.dense_multiplies as f64
    }
}

impl SparseModel {
    pub fn new(params: &ParameterSet, mask: Option<&BinaryMask>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        params.check_layout(config)?;
        let dense = match mask {
            Some(m) => m.apply(params)?,
            None => params.clone(),
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 1..=config.num_blocks {
            let mats = BLOCK_MATRIX_ROLES
                .iter()
                .map(|role| {
                    let name = block_matrix_name(b, role);
                    let w = params.get(&name)?;
                    match mask.and_then(|m| m.get(&name)) {
                        Some(mu) => to_sparse(w, mu),
                        None => dense_to_sparse(w),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(mats.try_into().expect("six roles"));
        }
        Ok(SparseModel {
            config: config.clone(),
            dense,
            blocks,
        })
    }

    pub fn block_matrix(&self, block: usize, role: usize) -> &SparseMatrix {
        &self.blocks[block - 1][role]
    }

    /// Fraction of block-matrix entries stored.
    pub fn density(&self) -> f64 {
        let (nnz, size) = self.blocks.iter().flatten().fold((0, 0), |(n, s), m| {
            (n + m.nnz(), s + m.rows * m.cols)
        });
        nnz as f64 / size as f64
    }
}

fn add_bias(mut x: Tensor, b: &Tensor) -> Tensor {
    let n = b.len();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % n];
    }
    x
}

/// Inference-mode encoder forward pass using sparse products for the block
/// matrices. Matches the dense masked `encode` to floating-point reordering.
pub fn sparse_encode(model: &SparseModel, tokens: &[usize]) -> Result<SparseOutput> {
    let cfg = &model.config;
    validate_tokens(cfg, tokens)?;
    let p = &model.dense;
    let s = tokens.len();
    let h = cfg.hidden_size;
    let (word, pos) = (p.get("embed.word")?, p.get("embed.pos")?);
    let mut e = Vec::with_capacity(s * h);
    for (i, &t) in tokens.iter().enumerate() {
        e.extend(word.row(t).iter().zip(pos.row(i)).map(|(a, b)| a + b));
    }
    let ln = |x: &Tensor, prefix: &str| layernorm(x, p.get(&format!("{prefix}.gain"))?, p.get(&format!("{prefix}.bias"))?, cfg.layernorm_eps);
    let mut x = ln(&Tensor::new(vec![s, h], e)?, "embed.ln")?;
    let (mut count, mut dense_count) = (0, 0);
    for (bi, mats) in model.blocks.iter().enumerate() {
        let b = format!("block{}", bi + 1);
        let mut affine = |x: &Tensor, m: &SparseMatrix, bias: &str| -> Result<Tensor> {
            let (y, c) = sparse_matmul(x, m)?;
            count += c;
            dense_count += s * m.rows * m.cols;
            Ok(add_bias(y, p.get(&format!("{b}.{bias}.b"))?))
        };
        let q = affine(&x, &mats[0], "attn.q")?;
        let k = affine(&x, &mats[1], "attn.k")?;
        let v = affine(&x, &mats[2], "attn.v")?;
        let a = attention(&q, &k, &v, cfg.num_heads)?;
        let d = affine(&a, &mats[3], "attn.d")?;
        let inner = ln(&x.zip_map(&d, |u, w| u + w)?, &format!("{b}.ln1"))?;
        let f = gelu(&affine(&inner, &mats[4], "ff.in")?)?;
        let o = affine(&f, &mats[5], "ff.out")?;
        x = ln(&inner.zip_map(&o, |u, w| u + w)?, &format!("{b}.ln2"))?;
    }
    let first = Tensor::new(vec![1, h], x.row(0).to_vec())?;
    let pooled = add_bias(ops::matmul(&first, p.get("pool.w")?)?, p.get("pool.b")?).map(f64::tanh);
    Ok(SparseOutput {
        pooled: pooled.reshape(vec![h])?,
        multiplies: count,
        dense_multiplies: dense_count,
    })
}
