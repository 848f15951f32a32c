//! Dense row-major f64 tensors, real and complex.
//!
//! All operations are pure functions over immutable inputs; tensors are
//! plain owned buffers and safe to share or send across threads.

use crate::error::{Error, Result};

/// Dense real tensor: `shape` extents, row-major `data`, 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(RealTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        RealTensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Spatial extents: the last two axes.
    pub fn hw(&self) -> Result<(usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!(
                "need rank >= 2 for spatial ops, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[self.rank() - 2], self.shape[self.rank() - 1]))
    }

    /// Interpret as (batch, channels, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::Shape(format!(
                "expected rank-4 (B, C, H, W) tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Reshape without copying; the element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Divergence(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(RealTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Toroidal roll of the last two axes by (dy, dx); negative shifts wrap.
    pub fn circular_shift(&self, dy: i64, dx: i64) -> Self {
        let (h, w) = self.hw().expect("circular_shift needs rank >= 2");
        let plane = h * w;
        let planes = self.data.len() / plane;
        let sy = dy.rem_euclid(h as i64) as usize;
        let sx = dx.rem_euclid(w as i64) as usize;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..planes {
            let src = &self.data[p * plane..(p + 1) * plane];
            let dst = &mut out[p * plane..(p + 1) * plane];
            for y in 0..h {
                let ty = (y + sy) % h;
                for x in 0..w {
                    let tx = (x + sx) % w;
                    dst[ty * w + tx] = src[y * w + x];
                }
            }
        }
        RealTensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Concatenate along axis 1 (channels) of rank-4 tensors.
    pub fn concat_channels(parts: &[&RealTensor]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let (b, _, h, w) = parts[0].dims4()?;
        let mut c_total = 0;
        for t in parts {
            let (tb, tc, th, tw) = t.dims4()?;
            if (tb, th, tw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    parts[0].shape, t.shape
                )));
            }
            c_total += tc;
        }
        let mut out = RealTensor::zeros(&[b, c_total, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut off = 0;
            for t in parts {
                let tc = t.shape[1];
                let src = &t.data[bi * tc * plane..(bi + 1) * tc * plane];
                let dst_start = (bi * c_total + off) * plane;
                out.data[dst_start..dst_start + tc * plane].copy_from_slice(src);
                off += tc;
            }
        }
        Ok(out)
    }
}

/// Dense complex tensor: equal-length `re`/`im` planes sharing `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_planes(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::Shape(format!(
                "complex planes (re {}, im {}) do not match shape {:?}",
                re.len(),
                im.len(),
                shape
            )));
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_real(t: &RealTensor) -> Self {
        ComplexTensor {
            shape: t.shape().to_vec(),
            re: t.data().to_vec(),
            im: vec![0.0; t.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn hw(&self) -> Result<(usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!(
                "need rank >= 2 for spatial ops, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[self.rank() - 2], self.shape[self.rank() - 1]))
    }

    pub fn re_tensor(&self) -> RealTensor {
        RealTensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn im_tensor(&self) -> RealTensor {
        RealTensor {
            shape: self.shape.clone(),
            data: self.im.clone(),
        }
    }

    /// Elementwise magnitude sqrt(re^2 + im^2). Non-expansive: for any u, v,
    /// | |u| - |v| | <= |u - v|.
    pub fn modulus(&self) -> RealTensor {
        RealTensor {
            shape: self.shape.clone(),
            data: self
                .re
                .iter()
                .zip(&self.im)
                .map(|(&r, &i)| (r * r + i * i).sqrt())
                .collect(),
        }
    }

    pub fn circular_shift(&self, dy: i64, dx: i64) -> Self {
        let re = self.re_tensor().circular_shift(dy, dx);
        let im = self.im_tensor().circular_shift(dy, dx);
        ComplexTensor {
            shape: self.shape.clone(),
            re: re.into_data(),
            im: im.into_data(),
        }
    }

    /// Pointwise complex product with a broadcast rank-2 factor.
    pub fn mul_filter(&self, filter: &ComplexTensor) -> Result<Self> {
        let (h, w) = self.hw()?;
        if filter.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "filter {:?} does not match spatial extents ({h}, {w})",
                filter.shape()
            )));
        }
        let plane = h * w;
        let planes = self.len() / plane;
        let mut out = ComplexTensor::zeros(&self.shape);
        for p in 0..planes {
            for k in 0..plane {
                let idx = p * plane + k;
                let (ar, ai) = (self.re[idx], self.im[idx]);
                let (br, bi) = (filter.re[k], filter.im[k]);
                out.re[idx] = ar * br - ai * bi;
                out.im[idx] = ar * bi + ai * br;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .fold(0.0f64, |m, (&r, &i)| m.max((r * r + i * i).sqrt()))
    }

    pub fn scale(&self, s: f64) -> Self {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().map(|v| v * s).collect(),
            im: self.im.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "complex sub on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().zip(&other.re).map(|(a, b)| a - b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    #[test]
    fn shift_identities() {
        let mut rng = seeded_rng(1, "shift");
        let t = RealTensor::from_vec(&[4, 4], (0..16).map(|_| rng.gen::<f64>()).collect()).unwrap();
        assert_eq!(t.circular_shift(0, 0), t);
        assert_eq!(t.circular_shift(4, 4), t);
        assert_eq!(t.circular_shift(1, 0).circular_shift(-1, 0), t);
        assert_eq!(t.circular_shift(-3, 7), t.circular_shift(1, 3));
    }

    #[test]
    fn modulus_basics() {
        let t = ComplexTensor::from_planes(&[2], vec![3.0, 0.0], vec![4.0, 0.0]).unwrap();
        let m = t.modulus();
        assert_eq!(m.data(), &[5.0, 0.0]);
    }

    #[test]
    fn modulus_is_one_lipschitz() {
        let mut rng = seeded_rng(2, "lipschitz");
        for _ in 0..1000 {
            let (ur, ui): (f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let (vr, vi): (f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let mu = (ur * ur + ui * ui).sqrt();
            let mv = (vr * vr + vi * vi).sqrt();
            let duv = ((ur - vr).powi(2) + (ui - vi).powi(2)).sqrt();
            assert!((mu - mv).abs() <= duv + 1e-15);
        }
    }

    #[test]
    fn concat_channel_counts() {
        let a = RealTensor::zeros(&[1, 2, 3, 3]);
        let b = RealTensor::zeros(&[1, 5, 3, 3]);
        let c = RealTensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 7, 3, 3]);
        let bad = RealTensor::zeros(&[1, 1, 4, 3]);
        assert!(RealTensor::concat_channels(&[&a, &bad]).is_err());
    }
}
