//! Transmission path: token codec, power normalisation and complex AWGN.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::TokenMatrix;
use crate::{seed, Error, Result};

/// Analytic stand-ins for a learned joint source-channel codec.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Codec {
    /// Consecutive real token entries are paired into complex symbols.
    #[default]
    Identity,
    /// Each token is projected onto a fixed random orthonormal basis of
    /// dimension `ceil(d * compression_ratio)` before packing.
    Linear { seed: u64, compression_ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Receiver SNR in dB; `f64::INFINITY` means a noiseless channel.
    pub snr_db: f64,
    pub seed: u64,
    pub codec: Codec,
}

impl ChannelConfig {
    pub fn noiseless(codec: Codec) -> Self {
        Self {
            snr_db: f64::INFINITY,
            seed: 0,
            codec,
        }
    }

    /// `sigma^2 = 10^(-snr_db / 10)` per complex symbol.
    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }
}

pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Complex channel symbols stored as `[re, im]` pairs, with the factor the
/// transmitter divided out during power normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector {
    pub symbols: Vec<[f64; 2]>,
    pub scale: f64,
}

impl SymbolVector {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Mean `|s_i|^2`.
    pub fn mean_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|[r, i]| r * r + i * i).sum::<f64>() / self.symbols.len() as f64
    }
}

/// A codec instantiated for a token dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCodec {
    codec: Codec,
    dim: usize,
    /// `d x d'` with orthonormal columns (linear codec only).
    basis: Option<DMatrix<f64>>,
}

impl TokenCodec {
    pub fn new(codec: Codec, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("token dimension must be positive".into()));
        }
        let basis = match codec {
            Codec::Identity => None,
            Codec::Linear {
                seed,
                compression_ratio,
            } => {
                if !(compression_ratio > 0.0 && compression_ratio <= 1.0) {
                    return Err(Error::Config(format!(
                        "compression ratio {compression_ratio} outside (0, 1]"
                    )));
                }
                let reduced = (dim as f64 * compression_ratio).ceil() as usize;
                Some(orthonormal_basis(dim, reduced, seed))
            }
        };
        Ok(Self { codec, dim, basis })
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// Reals per token after the codec (`d` or `d'`).
    pub fn reduced_dim(&self) -> usize {
        self.basis.as_ref().map_or(self.dim, |q| q.ncols())
    }

    /// `q` for a message of `n_tokens` tokens.
    pub fn channel_uses(&self, n_tokens: usize) -> usize {
        (n_tokens * self.reduced_dim()).div_ceil(2)
    }

    pub fn encode(&self, z: &TokenMatrix) -> Result<SymbolVector> {
        if z.dim() != self.dim {
            return Err(Error::Shape(format!("codec built for d={}, tokens have d={}", self.dim, z.dim())));
        }
        let projected;
        let m = match &self.basis {
            None => z.tokens(),
            Some(q) => {
                projected = z.tokens() * q;
                &projected
            }
        };
        let mut reals = Vec::with_capacity(m.len() + 1);
        for i in 0..m.nrows() {
            reals.extend(m.row(i).iter());
        }
        if reals.len() % 2 == 1 {
            reals.push(0.0);
        }
        let symbols = reals.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Ok(SymbolVector { symbols, scale: 1.0 })
    }

    /// Inverse of [`encode`](Self::encode). The token count travels out of band;
    /// returned rows all carry source count 1.
    pub fn decode(&self, s: &SymbolVector, expected_tokens: usize) -> Result<TokenMatrix> {
        let expected = self.channel_uses(expected_tokens);
        if s.len() != expected || expected_tokens == 0 {
            return Err(Error::Framing {
                expected,
                actual: s.len(),
            });
        }
        let k = self.reduced_dim();
        let reals: Vec<f64> = s
            .symbols
            .iter()
            .flat_map(|[r, i]| [r * s.scale, i * s.scale])
            .take(expected_tokens * k)
            .collect();
        let y = DMatrix::from_row_slice(expected_tokens, k, &reals);
        let tokens = match &self.basis {
            None => y,
            Some(q) => y * q.transpose(),
        };
        TokenMatrix::unit(tokens, 0)
    }
}

fn orthonormal_basis(dim: usize, reduced: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let g = DMatrix::from_fn(dim, reduced, |_, _| normal.sample(&mut rng));
    g.qr().q().columns(0, reduced).into_owned()
}

/// Scales `s` to unit mean power per symbol and records the factor.
pub fn normalize_power(s: &SymbolVector) -> Result<SymbolVector> {
    let p = s.mean_power();
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Numerical("cannot normalise an all-zero or non-finite symbol vector".into()));
    }
    let a = p.sqrt();
    Ok(SymbolVector {
        symbols: s.symbols.iter().map(|[r, i]| [r / a, i / a]).collect(),
        scale: s.scale * a,
    })
}

/// Adds circularly-symmetric complex Gaussian noise of variance `sigma^2` per
/// symbol. The noise stream is a pure function of `(cfg.seed, message)`;
/// concurrent transmissions must use distinct message counters.
pub fn transmit(s: &SymbolVector, cfg: &ChannelConfig, message: u64) -> SymbolVector {
    let var = cfg.noise_variance();
    if var == 0.0 {
        return s.clone();
    }
    let normal = Normal::new(0.0, (var / 2.0).sqrt()).expect("finite noise std");
    let mut rng = seed::indexed_rng(cfg.seed, message);
    SymbolVector {
        symbols: s
            .symbols
            .iter()
            .map(|[r, i]| [r + normal.sample(&mut rng), i + normal.sample(&mut rng)])
            .collect(),
        scale: s.scale,
    }
}

/// Encode, normalise, transmit and decode one token message.
pub fn send_tokens(z: &TokenMatrix, codec: &TokenCodec, cfg: &ChannelConfig, message: u64) -> Result<TokenMatrix> {
    let s = normalize_power(&codec.encode(z)?)?;
    let received = transmit(&s, cfg, message);
    codec
        .decode(&received, z.n_tokens())?
        .with_source_counts(z.source_counts().to_vec())
        .map(|t| t.with_layer_index(z.layer_index()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, d: usize, seed: u64) -> TokenMatrix {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        TokenMatrix::unit(DMatrix::from_fn(n, d, |_, _| normal.sample(&mut rng)), 6).unwrap()
    }

    #[test]
    fn snr_to_variance() {
        assert_eq!(noise_variance(0.0), 1.0);
        assert!((noise_variance(20.0) - 0.01).abs() < 1e-15);
        assert!((noise_variance(-5.0) - 3.162_277_660_168_379_5).abs() < 1e-12);
        assert_eq!(noise_variance(f64::INFINITY), 0.0);
    }

    #[test]
    fn channel_use_arithmetic() {
        let id = TokenCodec::new(Codec::Identity, 32).unwrap();
        assert_eq!(id.encode(&tokens(2, 32, 1)).unwrap().len(), 32);
        let lin = TokenCodec::new(
            Codec::Linear {
                seed: 3,
                compression_ratio: 0.5,
            },
            32,
        )
        .unwrap();
        assert_eq!(lin.reduced_dim(), 16);
        for n in 1..6 {
            assert_eq!(lin.encode(&tokens(n, 32, 1)).unwrap().len(), n * 8);
            assert_eq!(id.channel_uses(n), 16 * n);
        }
        // odd packing pads with one zero
        let odd = TokenCodec::new(Codec::Identity, 3).unwrap();
        assert_eq!(odd.encode(&tokens(1, 3, 1)).unwrap().len(), 2);
    }

    #[test]
    fn normalisation_examples() {
        let unit = SymbolVector {
            symbols: vec![[1.0, 0.0], [0.0, -1.0], [0.6, 0.8]],
            scale: 1.0,
        };
        let n = normalize_power(&unit).unwrap();
        assert!((n.scale - 1.0).abs() < 1e-15);
        for (a, b) in n.symbols.iter().zip(&unit.symbols) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }

        let doubled = SymbolVector {
            symbols: unit.symbols.iter().map(|[r, i]| [2.0 * r, 2.0 * i]).collect(),
            scale: 1.0,
        };
        let n2 = normalize_power(&doubled).unwrap();
        assert!((n2.scale - 2.0).abs() < 1e-15);
        for (a, b) in n2.symbols.iter().zip(&unit.symbols) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }

        let one = SymbolVector {
            symbols: vec![[3.0, 4.0]],
            scale: 1.0,
        };
        let n3 = normalize_power(&one).unwrap();
        assert_eq!(n3.symbols, vec![[0.6, 0.8]]);
        assert_eq!(n3.scale, 5.0);

        let zero = SymbolVector {
            symbols: vec![[0.0, 0.0]; 4],
            scale: 1.0,
        };
        assert!(matches!(normalize_power(&zero), Err(Error::Numerical(_))));
    }

    #[test]
    fn power_contract() {
        let z = tokens(9, 32, 4);
        let s = normalize_power(&TokenCodec::new(Codec::Identity, 32).unwrap().encode(&z).unwrap()).unwrap();
        assert!((s.mean_power() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_identity_round_trip() {
        let codec = TokenCodec::new(Codec::Identity, 32).unwrap();
        let z = tokens(5, 32, 2);
        let out = send_tokens(&z, &codec, &ChannelConfig::noiseless(Codec::Identity), 0).unwrap();
        let err = (out.tokens() - z.tokens()).norm() / z.tokens().norm();
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn noiseless_linear_round_trip_leaves_projection_residual() {
        let codec_kind = Codec::Linear {
            seed: 8,
            compression_ratio: 0.5,
        };
        let codec = TokenCodec::new(codec_kind, 32).unwrap();
        let q = codec.basis().unwrap().clone();
        assert!((q.transpose() * &q - DMatrix::identity(16, 16)).norm() < 1e-12);
        let z = tokens(4, 32, 5);
        let out = send_tokens(&z, &codec, &ChannelConfig::noiseless(codec_kind), 0).unwrap();
        let residual = z.tokens() - z.tokens() * &q * q.transpose();
        let err = out.tokens() - z.tokens();
        assert!((err.norm() - residual.norm()).abs() < 1e-10);
    }

    #[test]
    fn framing_error_on_length_mismatch() {
        let codec = TokenCodec::new(Codec::Identity, 32).unwrap();
        let s = codec.encode(&tokens(3, 32, 1)).unwrap();
        assert!(matches!(codec.decode(&s, 4), Err(Error::Framing { expected: 64, actual: 48 })));
    }

    #[test]
    fn noise_is_reproducible_per_message() {
        let cfg = ChannelConfig {
            snr_db: 5.0,
            seed: 77,
            codec: Codec::Identity,
        };
        let s = SymbolVector {
            symbols: vec![[1.0, 0.0]; 64],
            scale: 1.0,
        };
        assert_eq!(transmit(&s, &cfg, 3), transmit(&s, &cfg, 3));
        assert_ne!(transmit(&s, &cfg, 3), transmit(&s, &cfg, 4));
    }

    #[test]
    fn noise_variance_statistics() {
        let cfg = ChannelConfig {
            snr_db: 10.0,
            seed: 1,
            codec: Codec::Identity,
        };
        let n = 1_000_000;
        let s = SymbolVector {
            symbols: vec![[0.0, 0.0]; n],
            scale: 1.0,
        };
        let r = transmit(&s, &cfg, 0);
        let var_re = r.symbols.iter().map(|x| x[0] * x[0]).sum::<f64>() / n as f64;
        let var_im = r.symbols.iter().map(|x| x[1] * x[1]).sum::<f64>() / n as f64;
        assert!((var_re / 0.05 - 1.0).abs() < 0.01, "{var_re}");
        assert!((var_im / 0.05 - 1.0).abs() < 0.01, "{var_im}");
    }
}
