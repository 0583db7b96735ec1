//! Elementwise, matrix, reduction and shape operations.

use super::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Row-major GEMM on slices: C = alpha * op(A) * op(B) + beta * C, where
/// op transposes the stored matrix when the corresponding flag is set.
/// Logical dimensions after transposition are A: m x k, B: k x n.
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Config(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Iterate lane base offsets for a reduction/softmax along `axis`.
/// Elements of a lane live at `base + i * inner` for i in 0..shape[axis].
fn lanes(shape: &[usize], axis: usize) -> (Vec<usize>, usize, usize) {
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let mut bases = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for r in 0..inner {
            bases.push(o * len * inner + r);
        }
    }
    (bases, len, inner)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Box::new(|_out, parents, gy| {
                vec![
                    parents[0].requires_grad().then(|| gy.to_vec()),
                    parents[1].requires_grad().then(|| gy.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Box::new(|_out, parents, gy| {
                vec![
                    parents[0].requires_grad().then(|| gy.to_vec()),
                    parents[1]
                        .requires_grad()
                        .then(|| gy.iter().map(|g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Box::new(|_out, parents, gy| {
                let a = parents[0].values();
                let b = parents[1].values();
                vec![
                    parents[0]
                        .requires_grad()
                        .then(|| gy.iter().zip(b).map(|(g, bv)| g * bv).collect()),
                    parents[1]
                        .requires_grad()
                        .then(|| gy.iter().zip(a).map(|(g, av)| g * av).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |_out, parents, gy| {
                vec![parents[0]
                    .requires_grad()
                    .then(|| gy.iter().map(|g| g * c).collect())]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(|_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| gy.to_vec())]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let values = self.values().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(|_out, parents, gy| {
                let x = parents[0].values();
                vec![parents[0].requires_grad().then(|| {
                    gy.iter()
                        .zip(x)
                        .map(|(g, xv)| if *xv > 0.0 { *g } else { 0.0 })
                        .collect()
                })]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let values: Vec<f64> = self
            .values()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(|out, parents, gy| {
                let y = out.values();
                vec![parents[0].requires_grad().then(|| {
                    gy.iter().zip(y).map(|(g, yv)| g * yv * (1.0 - yv)).collect()
                })]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(|out, parents, gy| {
                let y = out.values();
                vec![parents[0].requires_grad().then(|| {
                    gy.iter().zip(y).map(|(g, yv)| g * (1.0 - yv * yv)).collect()
                })]
            }),
        )
    }

    /// Matrix product of [m,k] x [k,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut values = vec![0.0; m * n];
        gemm(false, false, m, k, n, 1.0, self.values(), other.values(), 0.0, &mut values);
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |_out, parents, gy| {
                let a = parents[0].values();
                let b = parents[1].values();
                let da = parents[0].requires_grad().then(|| {
                    let mut da = vec![0.0; m * k];
                    // dA = dC * B^T
                    gemm(false, true, m, n, k, 1.0, gy, b, 0.0, &mut da);
                    da
                });
                let db = parents[1].requires_grad().then(|| {
                    let mut db = vec![0.0; k * n];
                    // dB = A^T * dC
                    gemm(true, false, k, m, n, 1.0, a, gy, 0.0, &mut db);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Matrix-vector product of [m,k] x [k].
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || x.rank() != 1 {
            return Err(Error::Shape(format!(
                "matvec expects [m,k] x [k], got {:?} and {:?}",
                self.shape(),
                x.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        if x.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matvec: inner dimensions {:?} x {:?}",
                self.shape(),
                x.shape()
            )));
        }
        let mut values = vec![0.0; m];
        gemm(false, false, m, k, 1, 1.0, self.values(), x.values(), 0.0, &mut values);
        Ok(Tensor::from_op(
            vec![m],
            values,
            vec![self.clone(), x.clone()],
            Box::new(move |_out, parents, gy| {
                let a = parents[0].values();
                let xv = parents[1].values();
                let da = parents[0].requires_grad().then(|| {
                    // dA[i,j] = gy[i] * x[j]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            da[i * k + j] = gy[i] * xv[j];
                        }
                    }
                    da
                });
                let dx = parents[1].requires_grad().then(|| {
                    let mut dx = vec![0.0; k];
                    gemm(true, false, k, m, 1, 1.0, a, gy, 0.0, &mut dx);
                    dx
                });
                vec![da, dx]
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose2d on shape {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = x[i * n + j];
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            values,
            vec![self.clone()],
            Box::new(move |_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| {
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = gy[j * m + i];
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| gy.to_vec())]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (bases, len, inner) = lanes(self.shape(), axis);
        let x = self.values();
        let mut values = vec![0.0; x.len()];
        for &base in &bases {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[base + i * inner]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x[base + i * inner] - max).exp();
                values[base + i * inner] = e;
                sum += e;
            }
            for i in 0..len {
                values[base + i * inner] /= sum;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |out, parents, gy| {
                vec![parents[0].requires_grad().then(|| {
                    let y = out.values();
                    let mut dx = vec![0.0; gy.len()];
                    for &base in &bases {
                        let mut dot = 0.0;
                        for i in 0..len {
                            let idx = base + i * inner;
                            dot += gy[idx] * y[idx];
                        }
                        for i in 0..len {
                            let idx = base + i * inner;
                            dx[idx] = y[idx] * (gy[idx] - dot);
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.values().iter().sum();
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| vec![gy[0]; n])]
            }),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        Ok(self.sum_all()?.scale(1.0 / n as f64))
    }

    /// Sum along `axis`, dropping that axis from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (bases, len, inner) = lanes(self.shape(), axis);
        let x = self.values();
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut values = vec![0.0; bases.len()];
        for (o, &base) in bases.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..len {
                s += x[base + i * inner];
            }
            values[o] = s;
        }
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            Box::new(move |_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    for (o, &base) in bases.iter().enumerate() {
                        for i in 0..len {
                            dx[base + i * inner] = gy[o];
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    /// Mean along `axis`, dropping that axis from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Concatenate tensors of equal rank along `axis`; all other extents
    /// must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        check_axis("concat", parts[0].shape(), axis)?;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Shape(format!(
                    "concat: mixed ranks {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::Shape(format!(
                        "concat along {axis}: incompatible shapes {:?} vs {:?}",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let total: usize = out_shape.iter().product();
        let mut values = vec![0.0; total];
        let out_axis = out_shape[axis];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let pa = p.shape()[axis];
            spans.push((offset, pa));
            let pv = p.values();
            for o in 0..outer {
                let src = o * pa * inner;
                let dst = o * out_axis * inner + offset * inner;
                values[dst..dst + pa * inner].copy_from_slice(&pv[src..src + pa * inner]);
            }
            offset += pa;
        }
        Ok(Tensor::from_op(
            out_shape,
            values,
            parts.to_vec(),
            Box::new(move |_out, parents, gy| {
                parents
                    .iter()
                    .zip(&spans)
                    .map(|(p, &(off, pa))| {
                        p.requires_grad().then(|| {
                            let mut dx = vec![0.0; p.numel()];
                            for o in 0..outer {
                                let dst = o * pa * inner;
                                let src = o * out_axis * inner + off * inner;
                                dx[dst..dst + pa * inner]
                                    .copy_from_slice(&gy[src..src + pa * inner]);
                            }
                            dx
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Stack rank-1 tensors of equal length into a [rows, len] matrix.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Usage("stack_rows of zero tensors".into()));
        }
        let n = rows[0].numel();
        for r in rows {
            if r.rank() != 1 || r.numel() != n {
                return Err(Error::Shape(format!(
                    "stack_rows: expected rank-1 length {n}, got {:?}",
                    r.shape()
                )));
            }
        }
        let mut values = Vec::with_capacity(rows.len() * n);
        for r in rows {
            values.extend_from_slice(r.values());
        }
        Ok(Tensor::from_op(
            vec![rows.len(), n],
            values,
            rows.to_vec(),
            Box::new(move |_out, parents, gy| {
                parents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.requires_grad().then(|| gy[i * n..(i + 1) * n].to_vec()))
                    .collect()
            }),
        ))
    }

    /// Extract row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("row() on shape {:?}", self.shape())));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if i >= m {
            return Err(Error::Config(format!("row {i} out of range for {m} rows")));
        }
        let values = self.values()[i * n..(i + 1) * n].to_vec();
        Ok(Tensor::from_op(
            vec![n],
            values,
            vec![self.clone()],
            Box::new(move |_out, parents, gy| {
                vec![parents[0].requires_grad().then(|| {
                    let mut dx = vec![0.0; m * n];
                    dx[i * n..(i + 1) * n].copy_from_slice(gy);
                    dx
                })]
            }),
        ))
    }

    /// Add a length-n bias vector to every row of an [m,n] matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || bias.numel() != self.shape()[1] {
            return Err(Error::Shape(format!(
                "add_row_bias: {:?} + {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let b = bias.values();
        let values = self
            .values()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, bv)| x + bv))
            .collect();
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), bias.clone()],
            Box::new(move |_out, parents, gy| {
                let dx = parents[0].requires_grad().then(|| gy.to_vec());
                let db = parents[1].requires_grad().then(|| {
                    let mut db = vec![0.0; n];
                    for row in gy.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    db
                });
                vec![dx, db]
            }),
        ))
    }

    /// Affine map y = W x (+ b) for a rank-1 input, or Y = X W^T (+ b) per
    /// row for a rank-2 input. W is stored [out, in].
    pub fn affine(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "affine weight must be rank-2, got {:?}",
                weight.shape()
            )));
        }
        match self.rank() {
            1 => {
                let y = weight.matvec(self)?;
                match bias {
                    Some(b) => y.add(b),
                    None => Ok(y),
                }
            }
            2 => {
                let y = self.matmul(&weight.transpose2d()?)?;
                match bias {
                    Some(b) => y.add_row_bias(b),
                    None => Ok(y),
                }
            }
            _ => Err(Error::Shape(format!(
                "affine input must be rank-1 or rank-2, got {:?}",
                self.shape()
            ))),
        }
    }

    /// Detached copy of slice `[t]` along the first axis (data access for
    /// frame extraction; never differentiable).
    pub fn index_axis0(&self, t: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!(
                "index_axis0 on shape {:?}",
                self.shape()
            )));
        }
        if t >= self.shape()[0] {
            return Err(Error::Config(format!(
                "index {t} out of range for first extent {}",
                self.shape()[0]
            )));
        }
        let sub_shape = self.shape()[1..].to_vec();
        let stride = strides_of(self.shape())[0];
        let values = self.values()[t * stride..(t + 1) * stride].to_vec();
        Tensor::new(&sub_shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!(
                (g - w).abs() <= tol,
                "index {i}: got {g}, want {w} (tol {tol})"
            );
        }
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_close(y.values(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 7], 3.0, &mut rng);
        let y = x.softmax(1).unwrap();
        for row in y.values().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        let x = Tensor::new(&[2], vec![1000.0, 1001.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!(y.values().iter().all(|v| v.is_finite()));
        assert!((y.values()[0] + y.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
        let y = x.relu();
        assert_eq!(y.values(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        let (av, bv) = (a.values(), b.values());
        let mut want = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                for p in 0..5 {
                    want[i * 3 + j] += av[i * 5 + p] * bv[p * 3 + j];
                }
            }
        }
        assert_close(c.values(), &want, 1e-6);
    }

    #[test]
    fn matmul_inner_dim_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn axis_out_of_range_is_config_error() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(x.softmax(2), Err(Error::Config(_))));
        assert!(matches!(x.sum_axis(5), Err(Error::Config(_))));
    }

    #[test]
    fn concat_and_split_gradients() {
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = c.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn concat_axis1() {
        let a = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.values(), &[1.0, 10.0, 20.0, 3.0, 30.0, 40.0]);
    }

    #[test]
    fn mean_axis_drops_axis() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m0 = x.mean_axis(0).unwrap();
        assert_eq!(m0.shape(), &[3]);
        assert_close(m0.values(), &[2.5, 3.5, 4.5], 1e-12);
        let m1 = x.mean_axis(1).unwrap();
        assert_close(m1.values(), &[2.0, 5.0], 1e-12);
    }

    #[test]
    fn affine_vector_and_matrix_agree() {
        let w = Tensor::param(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let b = Tensor::param(&[2], vec![0.1, -0.2]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let yv = x.affine(&w, Some(&b)).unwrap();
        let xm = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ym = xm.affine(&w, Some(&b)).unwrap();
        assert_close(yv.values(), ym.values(), 1e-12);
        // y = W x + b = [1-3+0.1, 2+2+1.5-0.2]
        assert_close(yv.values(), &[-1.9, 5.3], 1e-12);
    }

    #[test]
    fn stack_rows_roundtrip() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let m = Tensor::stack_rows(&[a, b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        let r1 = m.row(1).unwrap();
        assert_eq!(r1.values(), &[3.0, 4.0]);
    }
}
