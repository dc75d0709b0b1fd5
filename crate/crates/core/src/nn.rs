//! Dense kernels and the Adam optimizer for the region generator.

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
///
/// `op(a)` is `m x k`; if `a_t` the buffer holds `a` as `k x m`. Likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds a `channels x side x side` input for a 3x3, padding-1 convolution.
///
/// Output is `(channels * 9) x (side * side)`.
pub(crate) fn im2col3(input: &[f32], channels: usize, side: usize) -> Vec<f32> {
    let area = side * side;
    let mut cols = vec![0.0f32; channels * 9 * area];
    for ch in 0..channels {
        let plane = &input[ch * area..(ch + 1) * area];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * area..][..area];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            row[y * side + x] = plane[sy as usize * side + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3(cols: &[f32], channels: usize, side: usize) -> Vec<f32> {
    let area = side * side;
    let mut out = vec![0.0f32; channels * area];
    for ch in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * area..][..area];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            out[ch * area + sy as usize * side + sx as usize] += row[y * side + x];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn relu_in_place(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Zeroes gradient entries where the forward activation was clipped.
pub(crate) fn relu_backward(grad: &mut [f32], activation: &[f32]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Vec<f32>], grads: &[&Vec<f32>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &transpose(m, k, &a), true, &transpose(k, n, &b), true, 0.0, &mut c2);
        assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (ch, side) = (2, 4);
        let x: Vec<f32> = (0..ch * side * side).map(|v| (v as f32 * 0.37).cos()).collect();
        let y: Vec<f32> = (0..ch * 9 * side * side).map(|v| (v as f32 * 0.11).sin()).collect();
        let lhs: f32 = im2col3(&x, ch, side).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im3(&y, ch, side)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f32, -1.0];
        let g = vec![0.3f32, -5.0];
        let mut adam = Adam::new(0.003, &[2]);
        adam.update(&mut [&mut p], &[&g]);
        assert!((p[0] - (1.0 - 0.003)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 0.003)).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }
}
