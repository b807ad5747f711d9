//! User keys, timestamp salts and the Box-Muller start point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use libm::erfc;

use crate::error::{Error, Result};
use crate::io::tensor_file::{decode_tensor_prefix, encode_tensor, DType};
use crate::tensor::{LatentTensor, Shape};

pub const SALT_MIN: f64 = 1e-7;

/// Φ(v), the standard normal CDF.
pub fn standard_normal_cdf(v: f64) -> f64 {
    0.5 * erfc(-v / std::f64::consts::SQRT_2)
}

/// A registered user's private key.
///
/// The key tensor is only reachable inside the crate; `Debug` output is redacted.
#[derive(Clone, PartialEq)]
pub struct UserKey {
    user_id: String,
    pub(crate) k: LatentTensor,
    created_at: u64,
}

impl std::fmt::Debug for UserKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserKey")
            .field("user_id", &self.user_id)
            .field("shape", &self.k.shape())
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

impl UserKey {
    pub fn from_seed(user_id: impl Into<String>, shape: Shape, seed: u64, created_at: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self {
            user_id: user_id.into(),
            k: LatentTensor::standard_normal(shape, &mut rng),
            created_at,
        }
    }

    pub fn from_tensor(user_id: impl Into<String>, k: LatentTensor, created_at: u64) -> Result<Self> {
        if !k.is_finite() {
            return Err(Error::param("key elements must be finite"));
        }
        Ok(Self {
            user_id: user_id.into(),
            k,
            created_at,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn shape(&self) -> Shape {
        self.k.shape()
    }

    /// Summary statistics of the key elements (mean, variance); never the values.
    pub fn moments(&self) -> (f64, f64) {
        let m = self.k.mean();
        let var = self.k.as_slice().iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.k.len() as f64;
        (m, var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Salt {
    pub seed: u64,
    pub s: LatentTensor,
}

/// Uniform salt seeded by the timestamp (integer seconds), clamped to
/// [SALT_MIN, 1 − SALT_MIN].
pub fn make_salt(timestamp: u64, shape: Shape) -> Salt {
    let mut rng = ChaCha12Rng::seed_from_u64(timestamp);
    let data = (0..crate::tensor::numel(shape))
        .map(|_| clamp_salt(rng.gen::<f64>()))
        .collect();
    Salt {
        seed: timestamp,
        s: LatentTensor::from_vec(shape, data).expect("length matches shape"),
    }
}

pub fn clamp_salt(u: f64) -> f64 {
    u.clamp(SALT_MIN, 1.0 - SALT_MIN)
}

/// √(−2 ln s)·cos(2π Φ(k)) elementwise.
pub fn box_muller(k: &LatentTensor, s: &LatentTensor) -> Result<LatentTensor> {
    k.zip_with(s, |kv, sv| {
        (-2.0 * sv.ln()).sqrt() * (2.0 * std::f64::consts::PI * standard_normal_cdf(kv)).cos()
    })
}

pub fn initialize_noise(key: &UserKey, salt: &Salt) -> Result<LatentTensor> {
    box_muller(&key.k, &salt.s)
}

const STORE_MAGIC: &[u8; 4] = b"PAIK";
const STORE_VERSION: u16 = 1;

/// Registered users, optionally backed by a file.
#[derive(Debug, Default)]
pub struct KeyStore {
    path: Option<PathBuf>,
    users: BTreeMap<String, UserKey>,
}

impl KeyStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open a store file, creating an empty store if it does not exist.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let users = if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_store(&bytes)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path),
            users,
        })
    }

    pub fn register_user(&mut self, user_id: &str, rng_seed: u64, shape: Shape, created_at: u64) -> Result<&UserKey> {
        if user_id.is_empty() {
            return Err(Error::param("user id must not be empty"));
        }
        if self.users.contains_key(user_id) {
            return Err(Error::DuplicateUser(user_id.to_string()));
        }
        let key = UserKey::from_seed(user_id, shape, rng_seed, created_at);
        self.users.insert(user_id.to_string(), key);
        if let Err(e) = self.save() {
            self.users.remove(user_id);
            return Err(e);
        }
        Ok(&self.users[user_id])
    }

    pub fn get(&self, user_id: &str) -> Result<&UserKey> {
        self.users
            .get(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        write_private(path, &encode_store(&self.users))
    }
}

fn encode_store(users: &BTreeMap<String, UserKey>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(users.len() as u32).to_le_bytes());
    for key in users.values() {
        out.extend_from_slice(&(key.user_id.len() as u32).to_le_bytes());
        out.extend_from_slice(key.user_id.as_bytes());
        out.extend_from_slice(&key.created_at.to_le_bytes());
        out.extend_from_slice(&encode_tensor(&key.k, DType::F64));
    }
    out
}

fn decode_store(bytes: &[u8]) -> Result<BTreeMap<String, UserKey>> {
    let short = || Error::Format("truncated key store".into());
    if bytes.len() < 10 || &bytes[..4] != STORE_MAGIC {
        return Err(Error::Format("missing PAIK magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported key store version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let mut pos = 10;
    let mut users = BTreeMap::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(bytes.get(pos..pos + 4).ok_or_else(short)?.try_into().unwrap()) as usize;
        pos += 4;
        let id = std::str::from_utf8(bytes.get(pos..pos + len).ok_or_else(short)?)
            .map_err(|_| Error::Format("user id is not UTF-8".into()))?
            .to_string();
        pos += len;
        let created_at = u64::from_le_bytes(bytes.get(pos..pos + 8).ok_or_else(short)?.try_into().unwrap());
        pos += 8;
        let (k, used) = decode_tensor_prefix(&bytes[pos..])?;
        pos += used;
        if users.contains_key(&id) {
            return Err(Error::Format(format!("duplicate user `{id}` in key store")));
        }
        users.insert(id.clone(), UserKey::from_tensor(id, k, created_at)?);
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes in key store".into()));
    }
    Ok(users)
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
