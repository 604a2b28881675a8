//! Chebyshev-map key agreement and keystream image encryption.
//!
//! Toy-grade: Chebyshev public-key schemes over the reals have known breaks.
//!
//! Keys live on the phase grid `x = cos(2π·a/P)` with `P` prime. On that grid
//! `T_n(x) = cos(2π·(n·a mod P)/P)`, so both parties evaluate the shared
//! secret from the same integer phase and obtain bit-identical values, which
//! the chaotic keystream requires. The general [`chebyshev`] evaluator works
//! for any `x ∈ [-1, 1]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::parse_config;
use crate::datapipe::{Image, LabeledImage, LabeledImageDataset};
use crate::error::{Error, Result};

/// Degrees above this are evaluated with `cos(n·arccos x)`.
pub const RECURRENCE_LIMIT: u64 = 4096;

/// Largest prime below 2³².
pub const PHASE_MODULUS: u64 = 4_294_967_291;

pub const DEFAULT_SKIP_THRESHOLD: f64 = 0.05;

pub const KEY_DEGREE_MIN: u64 = 1 << 16;
pub const KEY_DEGREE_MAX: u64 = 1 << 20;

fn check_domain(x: f64) -> Result<()> {
    if !(x.abs() <= 1.0) {
        return Err(Error::Domain(format!("Chebyshev argument {x} is outside [-1, 1]")));
    }
    Ok(())
}

/// `T_p(x)` by the three-term recurrence `T_{p+1} = 2x·T_p − T_{p−1}`.
pub fn chebyshev_recurrence(p: u64, x: f64) -> Result<f64> {
    check_domain(x)?;
    if p == 0 {
        return Ok(1.0);
    }
    let (mut prev, mut cur) = (1.0, x);
    for _ in 1..p {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// `[T_0(x), …, T_max(x)]` in one pass; entry `p` is bitwise equal to
/// [`chebyshev_recurrence`]`(p, x)`.
pub fn chebyshev_table(max_degree: u64, x: f64) -> Result<Vec<f64>> {
    check_domain(x)?;
    let mut t = Vec::with_capacity(max_degree as usize + 1);
    t.push(1.0);
    if max_degree >= 1 {
        t.push(x);
    }
    for p in 2..=max_degree as usize {
        t.push(2.0 * x * t[p - 1] - t[p - 2]);
    }
    Ok(t)
}

/// `T_p(x) = cos(p·arccos x)`.
pub fn chebyshev_trig(p: u64, x: f64) -> Result<f64> {
    check_domain(x)?;
    Ok((p as f64 * x.acos()).cos())
}

/// Degree-`p` Chebyshev polynomial at `x`: recurrence up to
/// [`RECURRENCE_LIMIT`], closed form beyond.
pub fn chebyshev(p: u64, x: f64) -> Result<f64> {
    if p <= RECURRENCE_LIMIT {
        chebyshev_recurrence(p, x)
    } else {
        chebyshev_trig(p, x)
    }
}

/// `cos(2π·k/P)`, computed from the folded phase so that `k` and `P − k`
/// give identical bits.
pub fn phase_cos(k: u64) -> f64 {
    let k = k % PHASE_MODULUS;
    let folded = k.min(PHASE_MODULUS - k);
    (folded as f64 * (std::f64::consts::TAU / PHASE_MODULUS as f64)).cos()
}

/// Folded grid phase of `y`; exact when `y` was produced by [`phase_cos`],
/// nearest grid point otherwise.
pub fn phase_of(y: f64) -> Result<u64> {
    check_domain(y)?;
    let half = PHASE_MODULUS / 2;
    let guess = (y.acos() * (PHASE_MODULUS as f64 / std::f64::consts::TAU)).round() as u64;
    let guess = guess.min(half);
    let lo = guess.saturating_sub(64);
    let hi = (guess + 64).min(half);
    Ok((lo..=hi)
        .find(|&k| phase_cos(k).to_bits() == y.to_bits())
        .unwrap_or(guess))
}

fn mul_mod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % PHASE_MODULUS as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublicKey {
    pub x: f64,
    /// `T_s(x)`.
    pub t_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChebyshevParams {
    pub x: f64,
    /// Private degree.
    pub s: u64,
    pub public: PublicKey,
}

impl ChebyshevParams {
    pub fn from_private(x: f64, s: u64) -> Result<Self> {
        if s < 2 {
            return Err(Error::Domain(format!("private degree must be >= 2, got {s}")));
        }
        let a = phase_of(x)?;
        let x = phase_cos(a);
        Ok(ChebyshevParams {
            x,
            s,
            public: PublicKey {
                x,
                t_s: phase_cos(mul_mod(s % PHASE_MODULUS, a)),
            },
        })
    }

    pub fn to_key_file(&self) -> String {
        format!(
            "# Chebyshev key pair (toy-grade secrecy, do not use to protect real data)\nx = {:?}\ns = {}\n",
            self.x, self.s
        )
    }

    pub fn from_key_file(text: &str) -> Result<Self> {
        let map = parse_config(text).map_err(Error::Input)?;
        let x: f64 = map
            .get("x")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Input("key file needs a numeric x".into()))?;
        let s: u64 = map
            .get("s")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Input("key file needs an integer s".into()))?;
        Self::from_private(x, s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_file()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_key_file(&text)
    }
}

/// Seeded key generation: `x` uniform on `[-1, 1]` (snapped to the phase
/// grid, spacing below 1e-9), `s` uniform on `[2¹⁶, 2²⁰]`.
pub fn keygen(seed: u64) -> ChebyshevParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let u: f64 = rng.gen_range(-1.0..=1.0);
        let s = rng.gen_range(KEY_DEGREE_MIN..=KEY_DEGREE_MAX);
        let params = ChebyshevParams::from_private(u, s).expect("u in range, s >= 2");
        if phase_of(params.x).expect("grid value") != 0 {
            return params;
        }
    }
}

/// Seeded ephemeral degree `r`, uniform on `[2¹⁶, 2²⁰]`.
pub fn ephemeral_degree(seed: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0e9e_3e7a_1d3e).gen_range(KEY_DEGREE_MIN..=KEY_DEGREE_MAX)
}

/// Encryptor side of the agreement: returns `(T_r(x), T_{r·s}(x))`.
pub fn shared_secret(public: &PublicKey, r: u64) -> Result<(f64, f64)> {
    if r == 0 {
        return Err(Error::Domain("ephemeral degree r must be positive".into()));
    }
    let a = phase_of(public.x)?;
    let b = phase_of(public.t_s)?;
    let r = r % PHASE_MODULUS;
    Ok((phase_cos(mul_mod(r, a)), phase_cos(mul_mod(r, b))))
}

/// Decryptor side: `T_s(T_r(x))` from the ciphertext header.
pub fn recover_secret(header_t_r: f64, s: u64) -> Result<f64> {
    let c = phase_of(header_t_r)?;
    Ok(phase_cos(mul_mod(s % PHASE_MODULUS, c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherMode {
    /// `X = M·k` per pixel on real values.
    Float,
    /// `X = M xor k` on bytes.
    Byte,
}

impl CipherMode {
    fn code(self) -> u8 {
        match self {
            CipherMode::Float => 0,
            CipherMode::Byte => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CipherMode::Float),
            1 => Some(CipherMode::Byte),
            _ => None,
        }
    }
}

impl std::str::FromStr for CipherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(CipherMode::Float),
            "byte" => Ok(CipherMode::Byte),
            other => Err(Error::Input(format!("unknown cipher mode {other:?} (float|byte)"))),
        }
    }
}

/// Real keystream: iterates `k ← 2k² − 1` from `secret`, dropping iterates
/// with `|k| < skip`.
pub fn keystream_float(secret: f64, len: usize, skip: f64) -> Result<Vec<f64>> {
    check_domain(secret)?;
    if !(0.0..0.5).contains(&skip) {
        return Err(Error::Input(format!("skip threshold must be in [0, 0.5), got {skip}")));
    }
    let mut out = Vec::with_capacity(len);
    let mut k = secret;
    while out.len() < len {
        k = 2.0 * k * k - 1.0;
        if k.abs() >= skip {
            out.push(k);
        }
    }
    Ok(out)
}

/// Byte keystream: every iterate quantised as `⌊(k+1)/2·256⌋`, clamped.
pub fn keystream_bytes(secret: f64, len: usize) -> Result<Vec<u8>> {
    check_domain(secret)?;
    let mut out = Vec::with_capacity(len);
    let mut k = secret;
    for _ in 0..len {
        k = 2.0 * k * k - 1.0;
        out.push(quantize(k));
    }
    Ok(out)
}

pub fn quantize(k: f64) -> u8 {
    ((k + 1.0) / 2.0 * 256.0).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plaintext {
    /// Pixel values in `[0, 1]`.
    Float(Image),
    Bytes {
        rows: usize,
        cols: usize,
        data: Vec<u8>,
    },
}

impl Plaintext {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Plaintext::Float(img) => (img.height, img.width),
            Plaintext::Bytes { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn from_image_bytes(img: &Image) -> Self {
        Plaintext::Bytes {
            rows: img.height,
            cols: img.width,
            data: img.to_bytes(),
        }
    }

    pub fn to_image(&self) -> Image {
        match self {
            Plaintext::Float(img) => img.clone(),
            Plaintext::Bytes { rows, cols, data } => {
                Image::from_bytes(*rows, *cols, data).expect("consistent shape")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Float(Vec<f64>),
    Byte(Vec<u8>),
}

/// Encrypted image `(T_r(x), X)`.
///
/// File layout (little-endian): `"FPTC"`, version `u8`, mode `u8`
/// (0 float, 1 byte), rows `u32`, cols `u32`, `T_r(x)` as `f64`, skip
/// threshold `f64`, then the row-major payload (`f64` or `u8` values).
#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub t_r: f64,
    pub rows: u32,
    pub cols: u32,
    pub skip_threshold: f64,
    pub payload: Payload,
}

const CT_MAGIC: &[u8; 4] = b"FPTC";
const CT_VERSION: u8 = 1;

impl Ciphertext {
    pub fn mode(&self) -> CipherMode {
        match self.payload {
            Payload::Float(_) => CipherMode::Float,
            Payload::Byte(_) => CipherMode::Byte,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CT_MAGIC);
        out.push(CT_VERSION);
        out.push(self.mode().code());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.t_r.to_le_bytes());
        out.extend_from_slice(&self.skip_threshold.to_le_bytes());
        match &self.payload {
            Payload::Float(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Byte(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(origin, why.to_string());
        const HEADER: usize = 4 + 1 + 1 + 4 + 4 + 8 + 8;
        if bytes.len() < HEADER || &bytes[..4] != CT_MAGIC {
            return Err(bad("not a ciphertext file"));
        }
        if bytes[4] != CT_VERSION {
            return Err(bad("unsupported ciphertext version"));
        }
        let mode = CipherMode::from_code(bytes[5]).ok_or_else(|| bad("unknown mode"))?;
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let t_r = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
        let skip_threshold = f64::from_le_bytes(bytes[22..30].try_into().unwrap());
        if !(t_r.abs() <= 1.0) {
            return Err(bad("header T_r(x) outside [-1, 1]"));
        }
        let n = rows as usize * cols as usize;
        let body = &bytes[HEADER..];
        let payload = match mode {
            CipherMode::Byte if body.len() == n => Payload::Byte(body.to_vec()),
            CipherMode::Float if body.len() == 8 * n => Payload::Float(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => return Err(bad("payload length does not match header shape")),
        };
        Ok(Ciphertext {
            t_r,
            rows,
            cols,
            skip_threshold,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Classifier view of the ciphertext: bytes scaled to `[0, 1]`, float
    /// payloads min-max normalised per image.
    pub fn to_model_input(&self) -> Image {
        let (h, w) = (self.rows as usize, self.cols as usize);
        match &self.payload {
            Payload::Byte(b) => Image::from_bytes(h, w, b).expect("consistent shape"),
            Payload::Float(v) => {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                let px = v
                    .iter()
                    .map(|&x| if span > 0.0 { ((x - lo) / span) as f32 } else { 0.0 })
                    .collect();
                Image::new(h, w, px).expect("consistent shape")
            }
        }
    }
}

/// Encrypt with the recipient's public key and ephemeral degree `r`.
pub fn encrypt(
    plain: &Plaintext,
    public: &PublicKey,
    r: u64,
    mode: CipherMode,
) -> Result<Ciphertext> {
    let (t_r, secret) = shared_secret(public, r)?;
    let (rows, cols) = plain.shape();
    let n = rows * cols;
    let payload = match (mode, plain) {
        (CipherMode::Float, Plaintext::Float(img)) => {
            if img.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input("float-mode pixels must lie in [0, 1]".into()));
            }
            let ks = keystream_float(secret, n, DEFAULT_SKIP_THRESHOLD)?;
            Payload::Float(
                img.pixels
                    .iter()
                    .zip(&ks)
                    .map(|(&m, &k)| m as f64 * k)
                    .collect(),
            )
        }
        (CipherMode::Byte, Plaintext::Bytes { data, .. }) => {
            let ks = keystream_bytes(secret, n)?;
            Payload::Byte(data.iter().zip(&ks).map(|(m, k)| m ^ k).collect())
        }
        (mode, _) => {
            return Err(Error::Input(format!(
                "{mode:?} mode cannot encrypt this pixel type"
            )))
        }
    };
    Ok(Ciphertext {
        t_r,
        rows: rows as u32,
        cols: cols as u32,
        skip_threshold: DEFAULT_SKIP_THRESHOLD,
        payload,
    })
}

/// Decrypt with the private degree. A wrong key is not detected; it yields
/// an unrelated image.
pub fn decrypt(ct: &Ciphertext, s: u64) -> Result<Plaintext> {
    let secret = recover_secret(ct.t_r, s)?;
    let (rows, cols) = (ct.rows as usize, ct.cols as usize);
    let n = rows * cols;
    Ok(match &ct.payload {
        Payload::Float(x) => {
            let ks = keystream_float(secret, n, ct.skip_threshold)?;
            let px = x.iter().zip(&ks).map(|(&v, &k)| (v / k) as f32).collect();
            Plaintext::Float(Image::new(rows, cols, px)?)
        }
        Payload::Byte(x) => {
            let ks = keystream_bytes(secret, n)?;
            Plaintext::Bytes {
                rows,
                cols,
                data: x.iter().zip(&ks).map(|(c, k)| c ^ k).collect(),
            }
        }
    })
}

/// Encrypt every image of a dataset under one key and one `r`. Returns the
/// ciphertexts and the dataset of their classifier views.
pub fn encrypt_dataset(
    data: &LabeledImageDataset,
    public: &PublicKey,
    r: u64,
    mode: CipherMode,
) -> Result<(Vec<Ciphertext>, LabeledImageDataset)> {
    let mut cts = Vec::with_capacity(data.len());
    let mut items = Vec::with_capacity(data.len());
    for it in &data.items {
        let plain = match mode {
            CipherMode::Byte => Plaintext::from_image_bytes(&it.image),
            CipherMode::Float => Plaintext::Float(it.image.clone()),
        };
        let ct = encrypt(&plain, public, r, mode)?;
        items.push(LabeledImage {
            image: ct.to_model_input(),
            label: it.label,
            source: it.source.clone(),
        });
        cts.push(ct);
    }
    Ok((cts, LabeledImageDataset::new(data.side, items)?))
}

/// Pearson correlation of horizontally adjacent pixel pairs.
pub fn adjacent_correlation(rows: usize, cols: usize, values: &[f64]) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            xs.push(values[r * cols + c]);
            ys.push(values[r * cols + c + 1]);
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}
