use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Spatial kernel extent; every convolution in the network is 3×3.
pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Weights of one convolution layer: `kernels` is `[K, 3, 3, Cin]`, `bias` is `[K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let shape = kernels.shape();
        if shape.len() != 4 || shape[1] != KERNEL_SIZE || shape[2] != KERNEL_SIZE {
            return Err(Error::InvalidArgument(format!(
                "conv kernels must be [K, 3, 3, Cin], got {shape:?}"
            )));
        }
        if bias.shape() != [shape[0]] {
            return Err(Error::shape("ConvParams::new", &[shape[0]], bias.shape()));
        }
        Ok(ConvParams { kernels, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        ConvParams {
            kernels: Tensor::zeros(&[out_channels, KERNEL_SIZE, KERNEL_SIZE, in_channels]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            kernels: self.kernels.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Unrolls the zero-padded 3×3 neighbourhood of every pixel of one image into
/// a `[H·W, 9·Cin]` matrix whose column order matches the `[3, 3, Cin]` kernel
/// layout.
fn im2col<T: Real>(image: &[T], h: usize, w: usize, c: usize, col: &mut [T]) {
    let row_len = TAPS * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * row_len..][..row_len];
            for dy in 0..KERNEL_SIZE {
                let sy = y as isize + dy as isize - 1;
                for dx in 0..KERNEL_SIZE {
                    let sx = x as isize + dx as isize - 1;
                    let dst = &mut row[(dy * KERNEL_SIZE + dx) * c..][..c];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&image[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto an image.
fn col2im<T: Real>(col: &[T], h: usize, w: usize, c: usize, image: &mut [T]) {
    let row_len = TAPS * c;
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * row_len..][..row_len];
            for dy in 0..KERNEL_SIZE {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..KERNEL_SIZE {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &row[(dy * KERNEL_SIZE + dx) * c..][..c];
                    let dst = &mut image[(sy as usize * w + sx as usize) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with `c` row-major; `a` and `b` are
/// given with their row and column strides.
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: (&[T], isize, isize), b: (&[T], isize, isize), beta: T, c: &mut [T]) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1;
    assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2) && c.len() >= m * n);
    // SAFETY: the assertion above bounds every strided access.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_input<T: Real>(input: &Tensor<T>, params: &ConvParams<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (n, h, w, c) = input.dims4(op)?;
    if c != params.in_channels() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![n, h, w, params.in_channels()],
            actual: input.shape().to_vec(),
        });
    }
    Ok((n, h, w, c))
}

/// Same-size 3×3 cross-correlation with zero padding of one pixel:
/// `[N, H, W, Cin]` → `[N, H, W, K]`.
pub fn conv2d_mc_forward<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = check_input(input, params, "conv2d_mc_forward")?;
    let k = params.out_channels();
    let pixels = h * w;
    let row_len = TAPS * c;
    let mut out = vec![T::zero(); n * pixels * k];
    let mut col = vec![T::zero(); pixels * row_len];
    let kernels = params.kernels.data();
    let bias = params.bias.data();

    for b in 0..n {
        im2col(&input.data()[b * pixels * c..][..pixels * c], h, w, c, &mut col);
        let out_img = &mut out[b * pixels * k..][..pixels * k];
        for px in out_img.chunks_exact_mut(k) {
            px.copy_from_slice(bias);
        }
        // out[p, k] += col[p, :] · kernels[k, :]
        gemm(
            pixels,
            row_len,
            k,
            (&col, row_len as isize, 1),
            (kernels, 1, row_len as isize),
            T::one(),
            out_img,
        );
    }
    Tensor::from_vec(&[n, h, w, k], out)
}

/// Gradients of [`conv2d_mc_forward`] with respect to its input, kernels and bias.
pub fn conv2d_mc_backward<T: Real>(input: &Tensor<T>, params: &ConvParams<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (n, h, w, c) = check_input(input, params, "conv2d_mc_backward")?;
    let k = params.out_channels();
    if grad_out.shape() != [n, h, w, k] {
        return Err(Error::shape("conv2d_mc_backward", &[n, h, w, k], grad_out.shape()));
    }
    let pixels = h * w;
    let row_len = TAPS * c;
    let kernels = params.kernels.data();

    let mut grad_input = vec![T::zero(); n * pixels * c];
    let mut grad_kernels = vec![T::zero(); k * row_len];
    let mut grad_bias = vec![0.0f64; k];
    let mut col = vec![T::zero(); pixels * row_len];

    for b in 0..n {
        let g = &grad_out.data()[b * pixels * k..][..pixels * k];
        for px in g.chunks_exact(k) {
            for (acc, &v) in grad_bias.iter_mut().zip(px) {
                *acc += v.f64();
            }
        }

        im2col(&input.data()[b * pixels * c..][..pixels * c], h, w, c, &mut col);
        // grad_kernels[k, :] += g[:, k]ᵀ · col
        gemm(
            k,
            pixels,
            row_len,
            (g, 1, k as isize),
            (&col, row_len as isize, 1),
            T::one(),
            &mut grad_kernels,
        );

        // col-space gradient, reusing the column buffer
        gemm(
            pixels,
            k,
            row_len,
            (g, k as isize, 1),
            (kernels, row_len as isize, 1),
            T::zero(),
            &mut col,
        );
        col2im(&col, h, w, c, &mut grad_input[b * pixels * c..][..pixels * c]);
    }

    Ok(ConvGrads {
        input: Tensor::from_vec(&[n, h, w, c], grad_input)?,
        kernels: Tensor::from_vec(params.kernels.shape(), grad_kernels)?,
        bias: Tensor::from_vec(&[k], grad_bias.into_iter().map(T::of).collect())?,
    })
}
