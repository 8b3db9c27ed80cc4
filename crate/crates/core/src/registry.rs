//! Owner-side persistence: the user registry and the binary weight file.
//!
//! Weight file layout, all integers u32 little-endian: `b"DMRK"`, version,
//! tensor count, then per tensor the name length, UTF-8 name, rank, dims and
//! a row-major payload of f32 LE values.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{AccCodebook, BibdParams, CodebookSpec};
use crate::error::{io_err, Error, Result};
use crate::fingerprint::OwnerKeys;
use crate::host::{HostArch, MarkedTensor, ToyHostModel};
use crate::marking::EmbedConfig;

pub const WEIGHT_MAGIC: &[u8; 4] = b"DMRK";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;
/// Environment variable naming the default registry file.
pub const REGISTRY_ENV: &str = "NNMARK_REGISTRY";
pub const DEFAULT_REGISTRY_FILE: &str = "nnmark-registry.json";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFile(format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::WeightFile(format!("duplicate tensor name {:?}", t.name)));
            }
            let count: usize = t.dims.iter().map(|&d| d as usize).product();
            if count != t.data.len() {
                return Err(Error::WeightFile(format!(
                    "tensor {:?} has dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != WEIGHT_MAGIC {
            return Err(Error::WeightFile("bad magic, expected DMRK".into()));
        }
        let version = r.u32("version")?;
        if version != WEIGHT_FORMAT_VERSION {
            return Err(Error::WeightFile(format!(
                "unsupported format version {version}, expected {WEIGHT_FORMAT_VERSION}"
            )));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::WeightFile("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::WeightFile(format!("duplicate tensor name {name:?}")));
            }
            let rank = r.u32("rank")?;
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::WeightFile(format!("tensor {name:?} is too large")))?;
            let payload = r.take(n, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(Error::WeightFile(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.at
            )));
        }
        Ok(Self { tensors })
    }
}

/// Packs a model into named tensors. Parameters are stored as f32, so the
/// in-memory f64 values are rounded once on save.
pub fn model_to_weight_file(model: &ToyHostModel) -> WeightFile {
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let h = model.arch().channels as u32;
    WeightFile {
        tensors: vec![
            NamedTensor {
                name: "marked".into(),
                dims: model.marked().dims().iter().map(|&d| d as u32).collect(),
                data: to32(model.marked().data()),
            },
            NamedTensor {
                name: "dense_w".into(),
                dims: vec![model.classes() as u32, h],
                data: to32(model.dense_weights()),
            },
            NamedTensor {
                name: "dense_b".into(),
                dims: vec![model.classes() as u32],
                data: to32(model.dense_bias()),
            },
        ],
    }
}

pub fn model_from_weight_file(file: &WeightFile) -> Result<ToyHostModel> {
    let get = |name: &str| {
        file.get(name)
            .ok_or_else(|| Error::WeightFile(format!("missing tensor {name:?}")))
    };
    let to64 = |t: &NamedTensor| t.data.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    let marked = get("marked")?;
    let dims: [usize; 4] = marked
        .dims
        .iter()
        .map(|&d| d as usize)
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|_| Error::WeightFile("marked tensor must have rank 4".into()))?;
    ToyHostModel::from_parts(
        MarkedTensor::new(dims, to64(marked))?,
        to64(get("dense_w")?),
        to64(get("dense_b")?),
    )
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Registry(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Saves a model and returns the SHA-256 hex digest of the written file.
pub fn save_model(model: &ToyHostModel, path: &Path) -> Result<String> {
    let bytes = model_to_weight_file(model).to_bytes()?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_model(path: &Path) -> Result<ToyHostModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    model_from_weight_file(&WeightFile::from_bytes(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// One assigned user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEntry {
    /// 1-based, equal to the codebook column the user holds.
    pub user_id: usize,
    pub code_vector: Vec<u8>,
    #[serde(default)]
    pub embedding: Option<EmbedConfig>,
    #[serde(default)]
    pub weight_file: Option<PathBuf>,
    /// SHA-256 of the weight file, hex.
    #[serde(default)]
    pub digest: Option<String>,
    #[serde(default)]
    pub residual: Option<f64>,
    /// Seconds since the Unix epoch at assignment or last embedding.
    pub timestamp: u64,
}

/// The owner's registry. Keys are kept as seeds and regenerated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub owner_id: String,
    pub codebook: CodebookSpec,
    pub design: Option<BibdParams>,
    pub construction: String,
    pub master_seed: u64,
    pub host: HostArch,
    pub users: Vec<UserEntry>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Either a number of fresh users or explicit user ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assignment {
    Count(usize),
    Users(Vec<usize>),
}

impl RegistryRecord {
    pub fn new(owner_id: impl Into<String>, codebook: CodebookSpec, master_seed: u64, host: HostArch) -> Result<Self> {
        let book = codebook.build()?;
        if host.flat_len() < book.v() {
            return Err(Error::InvalidParams(format!(
                "marked layer has {} flattened weights, fewer than code length {}",
                host.flat_len(),
                book.v()
            )));
        }
        Ok(Self {
            owner_id: owner_id.into(),
            codebook,
            design: book.design(),
            construction: book.construction().to_string(),
            master_seed,
            host,
            users: Vec::new(),
        })
    }

    pub fn build_codebook(&self) -> Result<AccCodebook> {
        self.codebook.build()
    }

    /// Regenerates `U` and `X` from the master seed.
    pub fn keys(&self) -> Result<OwnerKeys> {
        let book = self.build_codebook()?;
        OwnerKeys::generate(book.v(), self.host.flat_len(), self.master_seed)
    }

    pub fn user(&self, user_id: usize) -> Option<&UserEntry> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn user_mut(&mut self, user_id: usize) -> Option<&mut UserEntry> {
        self.users.iter_mut().find(|u| u.user_id == user_id)
    }

    /// Binds codebook columns to users and returns the new ids.
    pub fn assign(&mut self, request: Assignment) -> Result<Vec<usize>> {
        let book = self.build_codebook()?;
        let n = book.n();
        let taken: BTreeSet<usize> = self.users.iter().map(|u| u.user_id).collect();
        let ids = match request {
            Assignment::Count(count) => {
                let free: Vec<usize> = (1..=n).filter(|j| !taken.contains(j)).take(count).collect();
                if free.len() < count {
                    return Err(Error::CodebookExhausted {
                        assigned: taken.len(),
                        capacity: n,
                    });
                }
                free
            }
            Assignment::Users(ids) => {
                let mut seen = BTreeSet::new();
                for &j in &ids {
                    if j == 0 || j > n {
                        return Err(Error::UserOutOfRange { index: j, max: n });
                    }
                    if taken.contains(&j) || !seen.insert(j) {
                        return Err(Error::Registry(format!("user {j} is already assigned")));
                    }
                }
                ids
            }
        };
        let t = now();
        for &j in &ids {
            self.users.push(UserEntry {
                user_id: j,
                code_vector: book.codevector(j - 1),
                embedding: None,
                weight_file: None,
                digest: None,
                residual: None,
                timestamp: t,
            });
        }
        Ok(ids)
    }

    /// Records a saved marked model for an assigned user.
    pub fn record_embedding(
        &mut self,
        user_id: usize,
        config: EmbedConfig,
        weight_file: PathBuf,
        digest: String,
        residual: f64,
    ) -> Result<()> {
        let entry = self
            .user_mut(user_id)
            .ok_or_else(|| Error::Registry(format!("user {user_id} is not assigned")))?;
        entry.embedding = Some(config);
        entry.weight_file = Some(weight_file);
        entry.digest = Some(digest);
        entry.residual = Some(residual);
        entry.timestamp = now();
        Ok(())
    }

    /// Checks the invariants: unique ids and code-vectors matching columns.
    pub fn validate(&self) -> Result<()> {
        let book = self.build_codebook()?;
        let mut seen = BTreeSet::new();
        for u in &self.users {
            if !seen.insert(u.user_id) {
                return Err(Error::Registry(format!("user {} appears twice", u.user_id)));
            }
            if u.user_id == 0 || u.user_id > book.n() {
                return Err(Error::UserOutOfRange { index: u.user_id, max: book.n() });
            }
            if u.code_vector != book.codevector(u.user_id - 1) {
                return Err(Error::Registry(format!(
                    "user {} code-vector does not match codebook column",
                    u.user_id
                )));
            }
        }
        Ok(())
    }

    /// Loads a user's weight file after checking its digest.
    pub fn load_user_model(&self, user_id: usize) -> Result<ToyHostModel> {
        let entry = self
            .user(user_id)
            .ok_or_else(|| Error::Registry(format!("user {user_id} is not assigned")))?;
        let (Some(path), Some(expected)) = (&entry.weight_file, &entry.digest) else {
            return Err(Error::Registry(format!("user {user_id} has no recorded weight file")));
        };
        let bytes = fs::read(path).map_err(io_err(path))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::DigestMismatch {
                path: path.clone(),
                expected: expected.clone(),
                actual,
            });
        }
        model_from_weight_file(&WeightFile::from_bytes(&bytes)?)
    }

    /// Verifies the digest of every recorded weight file.
    pub fn verify(&self) -> Result<usize> {
        let mut checked = 0;
        for u in self.users.iter().filter(|u| u.weight_file.is_some()) {
            self.load_user_model(u.user_id)?;
            checked += 1;
        }
        Ok(checked)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let record: Self = serde_json::from_str(&text)?;
        record.validate()?;
        Ok(record)
    }

    /// Atomically replaces the registry file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Loads, mutates and saves while holding an exclusive lock on a
    /// `.lock` sibling, so concurrent writers serialize.
    pub fn update<T>(path: &Path, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let lock_path = lock_path(path);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        lock.lock().map_err(io_err(&lock_path))?;
        let mut record = Self::load(path)?;
        let out = f(&mut record)?;
        record.save(path)?;
        Ok(out)
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".lock");
    PathBuf::from(os)
}

/// `$NNMARK_REGISTRY`, else `nnmark-registry.json` in the working directory.
pub fn default_registry_path() -> PathBuf {
    std::env::var_os(REGISTRY_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_REGISTRY_FILE))
}
