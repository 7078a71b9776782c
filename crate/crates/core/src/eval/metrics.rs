use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::patch::patchify;

/// Value reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Ridge added to covariance diagonals before the Fréchet distance.
pub const FID_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// MSE was exactly zero and `db` is the cap.
    pub exact: bool,
}

/// PSNR of images with values in `[0, 1]`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<Psnr> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "psnr of {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let mse = x
        .to_dtype(DType::F64)?
        .sub(&y.to_dtype(DType::F64)?)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            exact: true,
        }
    } else {
        Psnr {
            db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB),
            exact: false,
        }
    }
}

/// PSNR of images with values in `[-1, 1]`.
pub fn psnr_signed(x: &Tensor, y: &Tensor) -> Result<Psnr> {
    let unit = |t: &Tensor| -> Result<Tensor> { Ok(t.to_dtype(DType::F64)?.affine(0.5, 0.5)?) };
    psnr(&unit(x)?, &unit(y)?)
}

/// Mean over the batch of per-image PSNR, images in `[-1, 1]`.
pub fn mean_psnr_signed(x: &Tensor, y: &Tensor) -> Result<f64> {
    let b = x.dim(0)?;
    let mut acc = 0.0;
    for i in 0..b {
        acc += psnr_signed(&x.get(i)?, &y.get(i)?)?.db;
    }
    Ok(acc / b as f64)
}

/// Mean absolute difference of per-image, per-channel means.
pub fn mean_color_error(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let mx = x.to_dtype(DType::F64)?.mean((2, 3))?;
    let my = y.to_dtype(DType::F64)?.mean((2, 3))?;
    Ok(mx.sub(&my)?.abs()?.mean_all()?.to_scalar()?)
}

/// Non-overlapping `p x p` patches of `(B, C, H, W)` as `(B * n, C, p, p)`.
pub fn extract_patches(images: &Tensor, p: usize, stride: Option<usize>) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    match stride {
        None => {
            let tok = patchify(images, p)?;
            let n = tok.dim(1)?;
            Ok(tok.reshape((b * n, c, p, p))?)
        }
        Some(s) => {
            if s == 0 || p > h || p > w {
                return Err(Error::Config(format!(
                    "patch {p} with stride {s} on {h}x{w}"
                )));
            }
            let mut out = Vec::new();
            let mut y = 0;
            while y + p <= h {
                let mut x = 0;
                while x + p <= w {
                    out.push(images.narrow(2, y, p)?.narrow(3, x, p)?);
                    x += s;
                }
                y += s;
            }
            let cat = Tensor::stack(&out, 1)?;
            let n = out.len();
            Ok(cat.reshape((b * n, c, p, p))?)
        }
    }
}

fn gaussian_fit(features: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.nrows() as f64;
    let mu = features.row_mean().transpose();
    let centered = DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
        features[(i, j)] - mu[j]
    });
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two `(n, d)` feature sets.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Config(
            "Fréchet distance needs at least two samples per side".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols();
    let (mu1, s1) = gaussian_fit(a);
    let (mu2, s2) = gaussian_fit(b);
    let ridge = DMatrix::<f64>::identity(d, d) * FID_RIDGE;
    let (s1, s2) = (s1 + &ridge, s2 + &ridge);
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1));
    let diff = mu1 - mu2;
    let v = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(DMatrix::from_row_slice(n, d, &v))
}

/// Fréchet distance of pooled extractor features over image patches.
pub fn proxy_fid(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let fr = to_matrix(&extractor.pooled(real)?)?;
    let ff = to_matrix(&extractor.pooled(fake)?)?;
    frechet_distance(&fr, &ff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn psnr_examples() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 3, 4, 4), DType::F32, &dev).unwrap();
        let o = Tensor::ones((1, 3, 4, 4), DType::F32, &dev).unwrap();
        let p = psnr(&z, &z).unwrap();
        assert!(p.exact && p.db == PSNR_CAP_DB);
        assert_eq!(psnr(&z, &o).unwrap().db, 0.0);
        let tenth = (o.clone() * 0.1).unwrap();
        assert!((psnr(&z, &tenth).unwrap().db - 20.0).abs() < 1e-5);
        assert!(psnr(&z, &Tensor::zeros(3, DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let dev = Device::Cpu;
        let mut rng = crate::nn::seeded_rng(0);
        let x = crate::nn::gaussian(&mut rng, &[1, 3, 8, 8], DType::F64, &dev).unwrap();
        let n = crate::nn::gaussian(&mut rng, &[1, 3, 8, 8], DType::F64, &dev).unwrap();
        let mut last = f64::INFINITY;
        for s in [0.01, 0.05, 0.1, 0.5] {
            let y = x.add(&(&n * s).unwrap()).unwrap();
            let p = psnr(&x, &y).unwrap().db;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn frechet_identities() {
        let mut rng = crate::nn::seeded_rng(1);
        let a = DMatrix::from_fn(200, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(300, 3, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0
        });
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(frechet_distance(&a.rows(0, 1).into_owned(), &b).is_err());
    }

    /// `n` draws per column, standardised so sample moments equal `(mean, std)` exactly.
    fn synthetic_gaussian(rng: &mut impl Rng, n: usize, mean: &[f64], std: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::from_fn(n, mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        for j in 0..mean.len() {
            let col = m.column(j).into_owned();
            let mu = col.mean();
            let sd = (col.map(|v| (v - mu).powi(2)).sum() / (n as f64 - 1.0)).sqrt();
            for i in 0..n {
                m[(i, j)] = (m[(i, j)] - mu) / sd * std[j] + mean[j];
            }
        }
        m
    }

    #[test]
    fn frechet_closed_form() {
        let mut rng = crate::nn::seeded_rng(2);
        let n = 10_000;
        let a = synthetic_gaussian(&mut rng, n, &[0.0], &[1.0]);
        let b = synthetic_gaussian(&mut rng, n, &[1.0], &[1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.02, "{d}");

        let (m1, s1) = ([0.0, 1.0, -1.0, 0.5], [1.0, 0.5, 2.0, 1.0]);
        let (m2, s2) = ([0.5, 1.0, 0.0, 0.5], [1.5, 0.5, 1.0, 3.0]);
        let a = synthetic_gaussian(&mut rng, n, &m1, &s1);
        let b = synthetic_gaussian(&mut rng, n, &m2, &s2);
        let expect: f64 = (0..4)
            .map(|j| (m1[j] - m2[j]).powi(2) + (s1[j] - s2[j]).powi(2))
            .sum();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - expect).abs() < 0.02 * expect, "{d} vs {expect}");
    }

    #[test]
    fn patch_extraction() {
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            extract_patches(&x, 32, None).unwrap().dims(),
            &[8, 3, 32, 32]
        );
        assert_eq!(
            extract_patches(&x, 32, Some(16)).unwrap().dims(),
            &[18, 3, 32, 32]
        );
    }
}
