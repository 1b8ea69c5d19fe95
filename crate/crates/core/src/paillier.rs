//! Paillier additively homomorphic encryption over fixed-point reals.
//!
//! Uses the `g = n + 1` variant, so encryption is
//! `c = (1 + m·n) · rⁿ mod n²` and decryption needs only `λ = lcm(p−1, q−1)`.
//! Reals are encoded as `round(x · 2^scale_bits)` in `Z_n`, with the upper
//! half of `Z_n` standing for negative values. The key holder decrypts (and
//! may encrypt) through the CRT over `p²` and `q²`.

use std::hash::{DefaultHasher, Hash, Hasher};

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SCALE_BITS: u32 = 40;
pub const DEFAULT_KEY_BITS: usize = 2048;
pub const TEST_KEY_BITS: usize = 512;
pub const SUPPORTED_KEY_BITS: [usize; 3] = [512, 1024, 2048];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("unsupported key length {0} bits (expected 512, 1024 or 2048)")]
    UnsupportedBitLength(usize),
    #[error("plaintext {0} does not fit the fixed-point range of this key")]
    Overflow(f64),
    #[error("ciphertext scales differ: {0} vs {1} bits")]
    ScaleMismatch(u32, u32),
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("malformed ciphertext: {0}")]
    Malformed(String),
}

type PResult<T> = std::result::Result<T, PaillierError>;

fn fingerprint(n: &BigUint) -> u64 {
    let mut h = DefaultHasher::new();
    n.to_bytes_be().hash(&mut h);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    half_n: BigUint,
    bit_length: usize,
    fingerprint: u64,
}

#[derive(Clone, Debug)]
struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    /// `L_p(g^(p−1) mod p²)^(−1) mod p`
    hp: BigUint,
    hq: BigUint,
    /// `q^(−1) mod p`
    q_inv_p: BigUint,
    /// `(q²)^(−1) mod p²`, for CRT recombination mod n².
    q2_inv_p2: BigUint,
}

/// A Paillier key pair. The private half never leaves the key holder; other
/// parties receive [`PaillierKeys::public`].
#[derive(Clone, Debug)]
pub struct PaillierKeys {
    public: PublicKey,
    private: PrivateKey,
}

/// An encrypted fixed-point number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    scale_bits: u32,
    key: u64,
}

/// Fixed-point codec between reals and `Z_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointEncoding {
    pub scale_bits: u32,
}

impl Default for FixedPointEncoding {
    fn default() -> Self {
        Self { scale_bits: DEFAULT_SCALE_BITS }
    }
}

impl FixedPointEncoding {
    pub fn new(scale_bits: u32) -> Self {
        Self { scale_bits }
    }

    fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    /// Integer representative of `x` in `Z_n`.
    pub fn encode(&self, x: f64, pk: &PublicKey) -> PResult<BigUint> {
        let scaled = (x * self.scale()).round();
        if !scaled.is_finite() || scaled.abs() >= 2f64.powi(126) {
            return Err(PaillierError::Overflow(x));
        }
        let magnitude = BigUint::from(scaled.abs() as u128);
        if magnitude >= pk.half_n {
            return Err(PaillierError::Overflow(x));
        }
        Ok(if scaled < 0.0 && !magnitude.is_zero() { &pk.n - magnitude } else { magnitude })
    }

    pub fn decode(&self, m: &BigUint, pk: &PublicKey) -> f64 {
        let (negative, magnitude) = if *m >= pk.half_n { (true, &pk.n - m) } else { (false, m.clone()) };
        let v = magnitude.to_f64().unwrap_or(f64::INFINITY) / self.scale();
        if negative {
            -v
        } else {
            v
        }
    }
}

impl PublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn bit_length(&self) -> usize {
        self.bit_length
    }

    /// Rebuilds a public key from its modulus.
    pub fn from_modulus(n: BigUint) -> PResult<Self> {
        let bit_length = n.bits() as usize;
        if !SUPPORTED_KEY_BITS.contains(&bit_length) {
            return Err(PaillierError::UnsupportedBitLength(bit_length));
        }
        if n.is_even() {
            return Err(PaillierError::Malformed("even modulus".into()));
        }
        Ok(Self { fingerprint: fingerprint(&n), n_squared: &n * &n, half_n: &n >> 1u32, bit_length, n })
    }

    /// Big-endian modulus; the inverse of [`PublicKey::from_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.n.to_bytes_be()
    }

    pub fn from_bytes(bytes: &[u8]) -> PResult<Self> {
        Self::from_modulus(BigUint::from_bytes_be(bytes))
    }

    /// Bytes of a serialized ciphertext under this key.
    pub fn ciphertext_len(&self) -> usize {
        self.bit_length / 4 + 4
    }

    fn check(&self, c: &Ciphertext) -> PResult<()> {
        if c.key != self.fingerprint {
            return Err(PaillierError::KeyMismatch);
        }
        Ok(())
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        let bytes = self.bit_length / 8;
        loop {
            let mut buf = vec![0u8; bytes];
            rng.fill_bytes(&mut buf);
            let r = BigUint::from_bytes_be(&buf) % &self.n;
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `1 + m·n mod n²`, the deterministic part of an encryption.
    fn g_pow(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + m * &self.n) % &self.n_squared
    }

    pub fn encrypt_encoded<R: RngCore + ?Sized>(&self, m: &BigUint, scale_bits: u32, rng: &mut R) -> Ciphertext {
        let r = self.random_unit(rng);
        let rn = r.modpow(&self.n, &self.n_squared);
        Ciphertext { value: self.g_pow(m) * rn % &self.n_squared, scale_bits, key: self.fingerprint }
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: f64, enc: FixedPointEncoding, rng: &mut R) -> PResult<Ciphertext> {
        let m = enc.encode(x, self)?;
        Ok(self.encrypt_encoded(&m, enc.scale_bits, rng))
    }

    /// Trivial encryption of zero (`r = 1`); the neutral element of [`PublicKey::add`].
    pub fn zero(&self, enc: FixedPointEncoding) -> Ciphertext {
        Ciphertext { value: BigUint::one(), scale_bits: enc.scale_bits, key: self.fingerprint }
    }

    /// Homomorphic addition: `D(add(E(a), E(b))) = a + b`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> PResult<Ciphertext> {
        let mut out = a.clone();
        self.add_assign(&mut out, b)?;
        Ok(out)
    }

    pub fn add_assign(&self, acc: &mut Ciphertext, b: &Ciphertext) -> PResult<()> {
        self.check(acc)?;
        self.check(b)?;
        if acc.scale_bits != b.scale_bits {
            return Err(PaillierError::ScaleMismatch(acc.scale_bits, b.scale_bits));
        }
        acc.value = &acc.value * &b.value % &self.n_squared;
        Ok(())
    }

    /// Sum of ciphertexts; the empty sum is the trivial encryption of zero.
    pub fn sum<'a>(
        &self,
        cs: impl IntoIterator<Item = &'a Ciphertext>,
        enc: FixedPointEncoding,
    ) -> PResult<Ciphertext> {
        let mut acc = self.zero(enc);
        for c in cs {
            self.add_assign(&mut acc, c)?;
        }
        Ok(acc)
    }

    /// Elementwise sum of equal-length ciphertext vectors.
    pub fn add_vector(&self, a: &[Ciphertext], b: &[Ciphertext]) -> PResult<Vec<Ciphertext>> {
        if a.len() != b.len() {
            return Err(PaillierError::Malformed(format!("vector lengths {} and {}", a.len(), b.len())));
        }
        a.iter().zip(b).map(|(x, y)| self.add(x, y)).collect()
    }

    /// Multiplication by a plaintext integer: `D(mul_plain(E(a), k)) = k·a`.
    pub fn mul_plain(&self, c: &Ciphertext, k: i64) -> PResult<Ciphertext> {
        self.check(c)?;
        let exp = if k < 0 { &self.n - BigUint::from(k.unsigned_abs()) } else { BigUint::from(k as u64) };
        Ok(Ciphertext { value: c.value.modpow(&exp, &self.n_squared), scale_bits: c.scale_bits, key: c.key })
    }

    pub fn serialize(&self, c: &Ciphertext) -> PResult<Vec<u8>> {
        self.check(c)?;
        let width = self.bit_length / 4;
        let bytes = c.value.to_bytes_be();
        let mut out = vec![0u8; width - bytes.len()];
        out.extend_from_slice(&bytes);
        out.extend_from_slice(&c.scale_bits.to_be_bytes());
        Ok(out)
    }

    /// Parses a ciphertext produced by [`PublicKey::serialize`] under this key.
    pub fn deserialize(&self, bytes: &[u8]) -> PResult<Ciphertext> {
        if bytes.len() != self.ciphertext_len() {
            return Err(PaillierError::Malformed(format!(
                "expected {} bytes, got {}",
                self.ciphertext_len(),
                bytes.len()
            )));
        }
        let (value, tag) = bytes.split_at(self.bit_length / 4);
        let value = BigUint::from_bytes_be(value);
        if value >= self.n_squared || value.is_zero() {
            return Err(PaillierError::Malformed("value outside Z*_{n^2}".into()));
        }
        let scale_bits = u32::from_be_bytes(tag.try_into().expect("4-byte tag"));
        Ok(Ciphertext { value, scale_bits, key: self.fingerprint })
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }
}

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251,
];

fn random_bits<R: RngCore + ?Sized>(bits: usize, rng: &mut R) -> BigUint {
    let mut buf = vec![0u8; bits.div_ceil(8)];
    rng.fill_bytes(&mut buf);
    let extra = buf.len() * 8 - bits;
    buf[0] &= 0xff >> extra;
    BigUint::from_bytes_be(&buf)
}

/// Miller–Rabin with `rounds` random bases.
pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let bits = n.bits() as usize;
    'witness: for _ in 0..rounds {
        let a = loop {
            let a = random_bits(bits, rng) % n;
            if a >= two && a < n_minus_1 {
                break a;
            }
        };
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: RngCore + ?Sized>(bits: usize, rng: &mut R) -> BigUint {
    loop {
        let mut c = random_bits(bits, rng);
        // top two bits set so the product of two such primes has exactly 2·bits bits
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, 32, rng) {
            return c;
        }
    }
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

/// Generates a key pair whose modulus has exactly `bit_length` bits.
/// A seed makes generation reproducible (test mode); `None` draws from the OS.
pub fn keygen(bit_length: usize, seed: Option<u64>) -> PResult<PaillierKeys> {
    if !SUPPORTED_KEY_BITS.contains(&bit_length) {
        return Err(PaillierError::UnsupportedBitLength(bit_length));
    }
    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_os_rng(),
    };
    loop {
        let p = random_prime(bit_length / 2, &mut rng);
        let q = random_prime(bit_length / 2, &mut rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() || n.bits() as usize != bit_length {
            continue;
        }
        return Ok(PaillierKeys::from_primes(p, q));
    }
}

impl PaillierKeys {
    fn from_primes(p: BigUint, q: BigUint) -> Self {
        let n = &p * &q;
        let n_squared = &n * &n;
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        // with g = n + 1, L(g^λ mod n²) = λ mod n
        let mu = (&lambda % &n).modinv(&n).expect("λ invertible mod n");
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let g = &n + 1u32;
        let hp = l_function(&g.modpow(&(&p - 1u32), &p_squared), &p).modinv(&p).expect("hp");
        let hq = l_function(&g.modpow(&(&q - 1u32), &q_squared), &q).modinv(&q).expect("hq");
        let q_inv_p = q.modinv(&p).expect("q invertible mod p");
        let q2_inv_p2 = q_squared.modinv(&p_squared).expect("q² invertible mod p²");
        let half_n = &n >> 1u32;
        let bit_length = n.bits() as usize;
        Self {
            public: PublicKey { fingerprint: fingerprint(&n), n, n_squared, half_n, bit_length },
            private: PrivateKey { lambda, mu, p, q, p_squared, q_squared, hp, hq, q_inv_p, q2_inv_p2 },
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn bit_length(&self) -> usize {
        self.public.bit_length
    }

    /// Encryption by the key holder; `rⁿ mod n²` is computed through the CRT.
    pub fn encrypt<R: RngCore + ?Sized>(&self, x: f64, enc: FixedPointEncoding, rng: &mut R) -> PResult<Ciphertext> {
        let pk = &self.public;
        let sk = &self.private;
        let m = enc.encode(x, pk)?;
        let r = pk.random_unit(rng);
        let rp = r.modpow(&pk.n, &sk.p_squared);
        let rq = r.modpow(&pk.n, &sk.q_squared);
        // x ≡ rp (mod p²), x ≡ rq (mod q²)
        let diff = (&rp + &sk.p_squared - (&rq % &sk.p_squared)) % &sk.p_squared;
        let rn = &rq + &sk.q_squared * (diff * &sk.q2_inv_p2 % &sk.p_squared);
        Ok(Ciphertext { value: pk.g_pow(&m) * rn % &pk.n_squared, scale_bits: enc.scale_bits, key: pk.fingerprint })
    }

    /// Encrypts a batch in parallel. Randomness is derived from `seed` and the
    /// element index, so the output does not depend on the thread count.
    pub fn encrypt_batch(&self, xs: &[f64], enc: FixedPointEncoding, seed: u64) -> PResult<Vec<Ciphertext>> {
        const CHUNK: usize = 64;
        let chunks: Vec<PResult<Vec<Ciphertext>>> = xs
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(i, chunk)| {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                chunk.iter().map(|&x| self.encrypt(x, enc, &mut rng)).collect()
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Plaintext residue in `Z_n`.
    pub fn decrypt_raw(&self, c: &Ciphertext) -> PResult<BigUint> {
        let pk = &self.public;
        let sk = &self.private;
        pk.check(c)?;
        let mp = l_function(&c.value.modpow(&(&sk.p - 1u32), &sk.p_squared), &sk.p) * &sk.hp % &sk.p;
        let mq = l_function(&c.value.modpow(&(&sk.q - 1u32), &sk.q_squared), &sk.q) * &sk.hq % &sk.q;
        let diff = (&mp + &sk.p - (&mq % &sk.p)) % &sk.p;
        Ok(&mq + &sk.q * (diff * &sk.q_inv_p % &sk.p))
    }

    /// Textbook decryption `L(c^λ mod n²)·μ mod n`, kept as a cross-check of
    /// the CRT path.
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> PResult<BigUint> {
        let pk = &self.public;
        pk.check(c)?;
        let u = c.value.modpow(&self.private.lambda, &pk.n_squared);
        Ok(l_function(&u, &pk.n) * &self.private.mu % &pk.n)
    }

    pub fn decrypt(&self, c: &Ciphertext) -> PResult<f64> {
        let m = self.decrypt_raw(c)?;
        Ok(FixedPointEncoding::new(c.scale_bits).decode(&m, &self.public))
    }

    pub fn decrypt_batch(&self, cs: &[Ciphertext]) -> PResult<Vec<f64>> {
        cs.par_iter().map(|c| self.decrypt(c)).collect()
    }
}

/// Fresh randomness for encryption when no seed is required.
pub fn encryption_rng() -> impl Rng {
    ChaCha20Rng::from_os_rng()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn keys() -> &'static PaillierKeys {
        static KEYS: OnceLock<PaillierKeys> = OnceLock::new();
        KEYS.get_or_init(|| keygen(TEST_KEY_BITS, Some(7)).unwrap())
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(99)
    }

    const ENC: FixedPointEncoding = FixedPointEncoding { scale_bits: DEFAULT_SCALE_BITS };

    #[test]
    fn primality_against_trial_division() {
        let mut r = rng();
        for n in 0u32..3000 {
            let trial = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_probable_prime(&BigUint::from(n), 8, &mut r), trial, "{n}");
        }
        // Carmichael numbers
        for n in [561u32, 1105, 1729, 2465, 2821, 6601, 8911] {
            assert!(!is_probable_prime(&BigUint::from(n), 8, &mut r));
        }
    }

    #[test]
    fn integer_roundtrip_and_key_size() {
        let k = keys();
        assert_eq!(k.bit_length(), 512);
        let c = k.public().encrypt_encoded(&BigUint::from(123u32), 0, &mut rng());
        assert_eq!(k.decrypt_raw(&c).unwrap(), BigUint::from(123u32));
        assert_eq!(k.decrypt_textbook(&c).unwrap(), BigUint::from(123u32));
    }

    #[test]
    fn unsupported_length() {
        assert_eq!(keygen(100, Some(1)).unwrap_err(), PaillierError::UnsupportedBitLength(100));
    }

    #[test]
    fn seeded_keygen_is_deterministic() {
        let a = keygen(512, Some(3)).unwrap();
        let b = keygen(512, Some(3)).unwrap();
        assert_eq!(a.public(), b.public());
    }

    #[test]
    fn public_key_roundtrip() {
        let pk = keys().public();
        let back = PublicKey::from_bytes(&pk.to_bytes()).unwrap();
        assert_eq!(&back, pk);
        let c = back.encrypt(2.5, ENC, &mut rng()).unwrap();
        assert_eq!(keys().decrypt(&c).unwrap(), 2.5);
        assert!(PublicKey::from_bytes(&[7u8; 3]).is_err());
    }

    #[test]
    fn zero_and_negative() {
        let k = keys();
        let mut r = rng();
        assert_eq!(k.decrypt(&k.public().encrypt(0.0, ENC, &mut r).unwrap()).unwrap(), 0.0);
        // -1.5·2^40 is an integer, so the fixed-point roundtrip is exact
        let scaled = (-1.5f64 * 2f64.powi(40)).round();
        assert_eq!(scaled, -1_649_267_441_664.0);
        let back = k.decrypt(&k.public().encrypt(-1.5, ENC, &mut r).unwrap()).unwrap();
        assert!((back + 1.5).abs() <= 2f64.powi(-40));
    }

    #[test]
    fn encryption_is_randomized() {
        let k = keys();
        let mut r = rng();
        let a = k.public().encrypt(5.0, ENC, &mut r).unwrap();
        let b = k.public().encrypt(5.0, ENC, &mut r).unwrap();
        assert_ne!(a.value(), b.value());
        assert_eq!(k.decrypt(&a).unwrap(), 5.0);
        assert_eq!(k.decrypt(&b).unwrap(), 5.0);
        let c = k.encrypt(5.0, ENC, &mut r).unwrap();
        assert_ne!(a.value(), c.value());
        assert_eq!(k.decrypt(&c).unwrap(), 5.0);
    }

    #[test]
    fn additive_examples() {
        let k = keys();
        let pk = k.public();
        let mut r = rng();
        let two = pk.encrypt(2.0, ENC, &mut r).unwrap();
        let three = pk.encrypt(3.0, ENC, &mut r).unwrap();
        assert_eq!(k.decrypt(&pk.add(&two, &three).unwrap()).unwrap(), 5.0);
        let x = pk.encrypt(0.3125, ENC, &mut r).unwrap();
        let zero = pk.encrypt(0.0, ENC, &mut r).unwrap();
        assert_eq!(k.decrypt(&pk.add(&x, &zero).unwrap()).unwrap(), 0.3125);

        let ones: Vec<Ciphertext> = (0..900).map(|_| pk.encrypt(1.0, ENC, &mut r).unwrap()).collect();
        let total = k.decrypt(&pk.sum(&ones, ENC).unwrap()).unwrap();
        assert!((total - 900.0).abs() <= 900.0 * 2f64.powi(-40));
    }

    #[test]
    fn sums_and_vectors() {
        let k = keys();
        let pk = k.public();
        let mut r = rng();
        let empty = pk.sum(std::iter::empty(), ENC).unwrap();
        assert_eq!(k.decrypt(&empty).unwrap(), 0.0);
        let cs: Vec<Ciphertext> = [1.0, 2.0, 3.0].iter().map(|&v| pk.encrypt(v, ENC, &mut r).unwrap()).collect();
        assert_eq!(k.decrypt(&pk.sum(&cs, ENC).unwrap()).unwrap(), 6.0);
        let doubled = pk.add_vector(&cs, &cs).unwrap();
        assert_eq!(k.decrypt_batch(&doubled).unwrap(), vec![2.0, 4.0, 6.0]);
        assert!(pk.add_vector(&cs, &cs[..1]).is_err());
    }

    #[test]
    fn scalar_multiplication() {
        let k = keys();
        let mut r = rng();
        let c = k.public().encrypt(1.25, ENC, &mut r).unwrap();
        assert_eq!(k.decrypt(&k.public().mul_plain(&c, 4).unwrap()).unwrap(), 5.0);
        assert_eq!(k.decrypt(&k.public().mul_plain(&c, -2).unwrap()).unwrap(), -2.5);
    }

    #[test]
    fn scale_and_key_mismatch() {
        let k = keys();
        let pk = k.public();
        let mut r = rng();
        let a = pk.encrypt(1.0, ENC, &mut r).unwrap();
        let b = pk.encrypt(1.0, FixedPointEncoding::new(20), &mut r).unwrap();
        assert_eq!(pk.add(&a, &b).unwrap_err(), PaillierError::ScaleMismatch(40, 20));

        let other = keygen(512, Some(8)).unwrap();
        assert_eq!(other.decrypt(&a).unwrap_err(), PaillierError::KeyMismatch);
        assert!(other.public().add(&a, &a).is_err());
    }

    #[test]
    fn overflow_rejected() {
        let k = keys();
        let mut r = rng();
        assert!(matches!(k.public().encrypt(f64::NAN, ENC, &mut r), Err(PaillierError::Overflow(_))));
        assert!(matches!(k.public().encrypt(1e300, ENC, &mut r), Err(PaillierError::Overflow(_))));
        assert!(k.public().encrypt(2f64.powi(80), ENC, &mut r).is_ok());
    }

    #[test]
    fn serialization_roundtrip() {
        let k = keys();
        let pk = k.public();
        let c = pk.encrypt(-0.75, ENC, &mut rng()).unwrap();
        let bytes = pk.serialize(&c).unwrap();
        assert_eq!(bytes.len(), pk.ciphertext_len());
        assert_eq!(&bytes[bytes.len() - 4..], &40u32.to_be_bytes());
        let back = pk.deserialize(&bytes).unwrap();
        assert_eq!(back, c);
        assert!(pk.deserialize(&bytes[1..]).is_err());
    }

    #[test]
    fn batch_encryption_matches_thread_independent_seed() {
        let k = keys();
        let xs: Vec<f64> = (0..150).map(|i| (i as f64 - 75.0) / 100.0).collect();
        let a = k.encrypt_batch(&xs, ENC, 4).unwrap();
        let b = k.encrypt_batch(&xs, ENC, 4).unwrap();
        assert_eq!(a, b);
        let back = k.decrypt_batch(&a).unwrap();
        for (x, y) in xs.iter().zip(back) {
            assert!((x - y).abs() <= 2f64.powi(-40));
        }
    }
}
