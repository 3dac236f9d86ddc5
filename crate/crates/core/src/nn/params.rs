//! Named parameter storage, initialization, the Adam update, and the
//! checkpoint archive format.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{read_u16, read_u32};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OSCK";
const VERSION: u16 = 1;

/// Ordered named tensors; registration order is fixed by the architecture
/// walk, which keeps digests and checkpoints stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over the tensor archive, truncated to 16 bytes; combined
    /// with the config digest it identifies a checkpoint exactly.
    pub fn weight_digest(&self, config_digest: &[u8; 16]) -> [u8; 16] {
        let mut hasher = Sha256::new();
        hasher.update(config_digest);
        for (name, t) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update((t.rows() as u32).to_le_bytes());
            hasher.update((t.cols() as u32).to_le_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let hash = hasher.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&hash[..16]);
        out
    }

    /// Writes the named-tensor archive.
    pub fn write_to<W: Write>(&self, mut out: W, config_digest: &[u8; 16]) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(config_digest)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            out.write_all(&(t.rows() as u32).to_le_bytes())?;
            out.write_all(&(t.cols() as u32).to_le_bytes())?;
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the archive back; returns the stored config digest alongside.
    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, [u8; 16])> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptStream {
                offset: 0,
                reason: "bad OSCK magic".into(),
            });
        }
        let version = read_u16(&mut input)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut config_digest = [0u8; 16];
        input.read_exact(&mut config_digest)?;
        let count = read_u32(&mut input)? as usize;
        let mut store = ParamStore::new();
        let mut buf8 = [0u8; 8];
        for _ in 0..count {
            let name_len = read_u16(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::CorruptStream {
                offset: 0,
                reason: "non-utf8 tensor name".into(),
            })?;
            let rows = read_u32(&mut input)? as usize;
            let cols = read_u32(&mut input)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            for v in data.iter_mut() {
                input.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            store.add(name, Tensor::from_vec(rows, cols, data));
        }
        Ok((store, config_digest))
    }
}

/// Fan-in scaled normal init.
pub fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        // Box-Muller from two uniforms keeps the dependency surface small.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    t
}

/// First/second-moment adaptive optimizer with the usual constants.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(idx);
            for e in 0..grad.len() {
                let g = grad.data()[e];
                let me = self.beta1 * m.data()[e] + (1.0 - self.beta1) * g;
                let ve = self.beta2 * v.data()[e] + (1.0 - self.beta2) * g * g;
                m.data_mut()[e] = me;
                v.data_mut()[e] = ve;
                let m_hat = me / bc1;
                let v_hat = ve / bc2;
                p.data_mut()[e] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(1, values.len(), values.to_vec()));
        s
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = store_with(&[1.0, -2.0, 3.0]);
        let mut opt = Adam::new(1e-2, &params);
        opt.step(&mut params, &[Tensor::zeros(1, 3)]);
        assert_eq!(params.get(0).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps')
        // so |delta| is just under lr regardless of gradient scale.
        for g in [0.001f64, 1.0, 250.0] {
            let mut params = store_with(&[0.0]);
            let mut opt = Adam::new(1e-3, &params);
            opt.step(&mut params, &[Tensor::from_vec(1, 1, vec![g])]);
            let delta = params.get(0).data()[0];
            assert!(delta < 0.0, "moves against the gradient");
            assert!(delta.abs() <= 1e-3 * (1.0 + 1e-6));
            assert!((delta.abs() - 1e-3).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_deterministic() {
        let run = || {
            let mut params = store_with(&[0.5, -0.25]);
            let mut opt = Adam::new(1e-2, &params);
            for i in 0..20 {
                let g = Tensor::from_vec(1, 2, vec![(i as f64).sin(), (i as f64).cos()]);
                opt.step(&mut params, &[g]);
            }
            params.get(0).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_and_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add("a.w", init_weight(&mut rng, 3, 4, 12));
        store.add("a.b", Tensor::zeros(1, 4));
        store.add("z.t0", init_weight(&mut rng, 2, 2, 18));
        let cfg_digest = [7u8; 16];
        let mut buf = Vec::new();
        store.write_to(&mut buf, &cfg_digest).unwrap();
        let (back, stored_digest) = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(stored_digest, cfg_digest);
        assert_eq!(store.len(), back.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert_eq!(
            store.weight_digest(&cfg_digest),
            back.weight_digest(&cfg_digest)
        );
        // Tamper: digest must change.
        let mut other = back.clone();
        other.get_mut(0).data_mut()[0] += 1e-9;
        assert_ne!(
            store.weight_digest(&cfg_digest),
            other.weight_digest(&cfg_digest)
        );
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        let store = store_with(&[1.0]);
        let mut buf = Vec::new();
        store.write_to(&mut buf, &[0u8; 16]).unwrap();
        buf[5] = 99;
        assert!(matches!(
            ParamStore::read_from(buf.as_slice()),
            Err(Error::UnsupportedVersion(_))
        ));
    }
}
