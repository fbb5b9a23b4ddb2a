//! CPU kernels for the layers whose stock backward passes are dominated by
//! strided copies: convolution (as im2col + matmul) and 2x resampling.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

type KResult<T> = candle_core::Result<T>;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> KResult<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn by_dtype(
    s: &CpuStorage,
    f32_run: impl FnOnce() -> KResult<CpuStorage>,
    f64_run: impl FnOnce() -> KResult<CpuStorage>,
) -> KResult<CpuStorage> {
    match s {
        CpuStorage::F32(_) => f32_run(),
        CpuStorage::F64(_) => f64_run(),
        _ => Err(candle_core::Error::Msg(
            "kernels support f32 and f64 only".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Source coordinate for output `o` and kernel tap `t`, if inside.
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.pad)
            .filter(|&v| v < size)
    }
}

fn im2col<T: WithDType>(x: &[T], n: usize, c: usize, g: Geometry) -> Vec<T> {
    let (h, w, k) = (g.h, g.w, g.k);
    let (ho, wo) = g.out();
    let mut out = vec![T::from_f64(0.0); n * c * k * k * ho * wo];
    let mut dst = 0;
    for b in 0..n {
        for ci in 0..c {
            let plane = &x[(b * c + ci) * h * w..][..h * w];
            for i in 0..k {
                for j in 0..k {
                    for oy in 0..ho {
                        let row = &mut out[dst..dst + wo];
                        dst += wo;
                        let Some(iy) = g.src(oy, i, h) else { continue };
                        let src = &plane[iy * w..][..w];
                        for (ox, v) in row.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, j, w) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], n: usize, c: usize, g: Geometry) -> Vec<T> {
    let (h, w, k) = (g.h, g.w, g.k);
    let (ho, wo) = g.out();
    let mut out = vec![T::from_f64(0.0); n * c * h * w];
    let mut src = 0;
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut out[(b * c + ci) * h * w..][..h * w];
            for i in 0..k {
                for j in 0..k {
                    for oy in 0..ho {
                        let row = &cols[src..src + wo];
                        src += wo;
                        let Some(iy) = g.src(oy, i, h) else { continue };
                        let dst = &mut plane[iy * w..][..w];
                        for (ox, &v) in row.iter().enumerate() {
                            if let Some(ix) = g.src(ox, j, w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample2<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..][..w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

/// `h` and `w` are the output (half) sizes.
fn sum_pool2<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            let dst = &mut out[(p * h + y) * w..][..w];
            for dy in 0..2 {
                let row = &x[(p * 2 * h + 2 * y + dy) * 2 * w..][..2 * w];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d += row[2 * x] + row[2 * x + 1];
                }
            }
        }
    }
    out
}

/// (N,C,H,W) -> (N, C*k*k, Ho*Wo)
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: (N, C*k*k, Ho*Wo) -> (N,C,H,W), summing overlaps.
struct Col2Im {
    g: Geometry,
    channels: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> KResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let g = Geometry { h, w, ..self.0 };
        let (ho, wo) = g.out();
        let out = by_dtype(
            s,
            || Ok(CpuStorage::F32(im2col(contiguous::<f32>(s, l)?, n, c, g))),
            || Ok(CpuStorage::F64(im2col(contiguous::<f64>(s, l)?, n, c, g))),
        )?;
        Ok((out, Shape::from((n, c * g.k * g.k, ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> KResult<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            g: Geometry { h, w, ..self.0 },
            channels: c,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> KResult<(CpuStorage, Shape)> {
        let (n, _, _) = l.shape().dims3()?;
        let (g, c) = (self.g, self.channels);
        let out = by_dtype(
            s,
            || Ok(CpuStorage::F32(col2im(contiguous::<f32>(s, l)?, n, c, g))),
            || Ok(CpuStorage::F64(col2im(contiguous::<f64>(s, l)?, n, c, g))),
        )?;
        Ok((out, Shape::from((n, c, g.h, g.w))))
    }
}

/// Nearest-neighbour 2x upsampling.
struct Upsample2;

/// 2x2 block sums, the adjoint of [`Upsample2`].
struct SumPool2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> KResult<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = by_dtype(
            s,
            || {
                Ok(CpuStorage::F32(upsample2(
                    contiguous::<f32>(s, l)?,
                    n * c,
                    h,
                    w,
                )))
            },
            || {
                Ok(CpuStorage::F64(upsample2(
                    contiguous::<f64>(s, l)?,
                    n * c,
                    h,
                    w,
                )))
            },
        )?;
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> KResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum_pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> KResult<(CpuStorage, Shape)> {
        let (n, c, h2, w2) = l.shape().dims4()?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(candle_core::Error::Msg(format!(
                "sum_pool2 needs even sizes, got {h2}x{w2}"
            )));
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let out = by_dtype(
            s,
            || {
                Ok(CpuStorage::F32(sum_pool2(
                    contiguous::<f32>(s, l)?,
                    n * c,
                    h,
                    w,
                )))
            },
            || {
                Ok(CpuStorage::F64(sum_pool2(
                    contiguous::<f64>(s, l)?,
                    n * c,
                    h,
                    w,
                )))
            },
        )?;
        Ok((out, Shape::from((n, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> KResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2)?))
    }
}

/// Cross-correlation of (N,Ci,H,W) with (Co,Ci,k,k) weights, zero padding.
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, wci, k, k2) = weight.dims4()?;
    if wci != ci || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(crate::Error::Contract(format!(
            "conv2d input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let g = Geometry {
        k,
        stride,
        pad,
        h,
        w,
    };
    let (ho, wo) = g.out();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight
        .reshape((co, ci * k * k))?
        .broadcast_left(n)?
        .contiguous()?;
    let y = wm.matmul(&cols)?.reshape((n, co, ho, wo))?;
    Ok(match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, co, 1, 1))?)?,
        None => y,
    })
}

pub(crate) fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

pub(crate) fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok((x.contiguous()?.apply_op1(SumPool2)? * 0.25)?)
}

/// Convolution layer over explicit weight tensors.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}
