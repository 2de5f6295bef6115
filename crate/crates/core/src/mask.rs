//! Reliability masks: classical SNR oracle masks, delta masks derived from
//! static masks, and the isolated-element diagnostic.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::frontend::{DeltaConfig, Domain, SpectroTemporal};

/// T×K reliability mask (`true` = reliable, speech-dominated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub values: Array2<bool>,
    pub delta: Option<Array2<bool>>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self {
            values,
            delta: None,
        }
    }

    pub fn all_reliable(frames: usize, bands: usize) -> Self {
        let v = Array2::from_elem((frames, bands), true);
        Self {
            delta: Some(v.clone()),
            values: v,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn reliable_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Attaches a delta companion computed with `rule`.
    pub fn with_delta(mut self, d: &DeltaConfig, rule: DeltaRule) -> Result<Self> {
        self.delta = Some(delta_mask(&self, d, rule)?);
        Ok(self)
    }

    /// Delta mask, or an error if none is attached.
    pub fn delta_or_err(&self) -> Result<&Array2<bool>> {
        self.delta
            .as_ref()
            .ok_or_else(|| Error::ShapeMismatch("mask has no delta companion".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleThreshold {
    pub theta_db: f64,
}

impl Default for OracleThreshold {
    fn default() -> Self {
        Self { theta_db: 0.0 }
    }
}

/// How delta reliability is derived from the static mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaRule {
    /// Reliable only if every static cell in the ±W window is reliable.
    #[default]
    And,
    /// Reliable if any static cell in the window is reliable.
    Or,
}

impl std::str::FromStr for DeltaRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "and" => Ok(DeltaRule::And),
            "or" => Ok(DeltaRule::Or),
            o => Err(Error::InvalidConfig(format!("unknown delta rule `{o}`"))),
        }
    }
}

/// Cell `(t, k)` is reliable iff `10·log10(speech/noise) ≥ θ`.
pub fn oracle_mask(
    speech: &SpectroTemporal,
    noise: &SpectroTemporal,
    thr: OracleThreshold,
) -> Result<BinaryMask> {
    speech.expect_domain(Domain::LinearPower)?;
    noise.expect_domain(Domain::LinearPower)?;
    if speech.shape() != noise.shape() {
        return Err(Error::ShapeMismatch(format!(
            "speech {:?} vs noise {:?}",
            speech.shape(),
            noise.shape()
        )));
    }
    if !thr.theta_db.is_finite() {
        return Err(Error::InvalidConfig("oracle threshold must be finite".into()));
    }
    let mut values = Array2::from_elem(speech.shape(), false);
    ndarray::Zip::from(&mut values)
        .and(&speech.values)
        .and(&noise.values)
        .for_each(|m, &s, &n| *m = 10.0 * (s / n).log10() >= thr.theta_db);
    Ok(BinaryMask::new(values))
}

/// Delta-coefficient mask from a static mask, window ±W with edge-frame
/// replication.
pub fn delta_mask(stat: &BinaryMask, d: &DeltaConfig, rule: DeltaRule) -> Result<Array2<bool>> {
    d.validate()?;
    let (t_count, k_count) = stat.values.dim();
    let w = d.window_half_width as isize;
    let last = t_count as isize - 1;
    let mut out = Array2::from_elem((t_count, k_count), false);
    for t in 0..t_count as isize {
        for k in 0..k_count {
            let mut window = (t - w..=t + w).map(|u| stat.values[[u.clamp(0, last) as usize, k]]);
            out[[t as usize, k]] = match rule {
                DeltaRule::And => window.all(|r| r),
                DeltaRule::Or => window.any(|r| r),
            };
        }
    }
    Ok(out)
}

/// Reliable cells with no reliable 4-neighbour.
pub fn count_isolated_reliable(mask: &BinaryMask) -> usize {
    let v = &mask.values;
    let (t_count, k_count) = v.dim();
    let mut n = 0;
    for t in 0..t_count {
        for k in 0..k_count {
            if !v[[t, k]] {
                continue;
            }
            let neighbour = (t > 0 && v[[t - 1, k]])
                || (t + 1 < t_count && v[[t + 1, k]])
                || (k > 0 && v[[t, k - 1]])
                || (k + 1 < k_count && v[[t, k + 1]]);
            if !neighbour {
                n += 1;
            }
        }
    }
    n
}

const MASK_MAGIC: &[u8; 4] = b"MASK";

fn pack_bits(bits: &Array2<bool>) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], t: usize, k: usize) -> Array2<bool> {
    Array2::from_shape_fn((t, k), |(r, c)| {
        let i = r * k + c;
        bytes[i / 8] >> (i % 8) & 1 == 1
    })
}

/// `MASK`, u32 T, u32 K, u8 has_delta, then the static bits and optionally
/// the delta bits. Bits are row-major, least significant bit first; each
/// section is padded to a whole byte.
pub fn write_mask<W: Write>(mut w: W, mask: &BinaryMask) -> Result<()> {
    let (t, k) = mask.values.dim();
    if t == 0 || k == 0 {
        return Err(Error::EmptyInput("refusing to write an empty mask".into()));
    }
    if let Some(d) = &mask.delta {
        if d.dim() != (t, k) {
            return Err(Error::ShapeMismatch("delta mask shape differs from static".into()));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.push(mask.delta.is_some() as u8);
    buf.extend(pack_bits(&mask.values));
    if let Some(d) = &mask.delta {
        buf.extend(pack_bits(d));
    }
    w.write_all(&buf)
        .map_err(|e| Error::Format(format!("mask write: {e}")))
}

pub fn read_mask<R: Read>(mut r: R) -> Result<BinaryMask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("mask read: {e}")))?;
    if bytes.len() < 13 || &bytes[..4] != MASK_MAGIC {
        return Err(Error::Format("missing MASK header".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let has_delta = match bytes[12] {
        0 => false,
        1 => true,
        x => return Err(Error::Format(format!("bad has_delta flag {x}"))),
    };
    let section = (t * k).div_ceil(8);
    let expected = 13 + section * (1 + has_delta as usize);
    if t == 0 || k == 0 || bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "mask body is {} bytes, header {t}x{k} (delta: {has_delta}) implies {expected}",
            bytes.len()
        )));
    }
    let values = unpack_bits(&bytes[13..13 + section], t, k);
    let delta = has_delta.then(|| unpack_bits(&bytes[13 + section..], t, k));
    Ok(BinaryMask { values, delta })
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut buf = Vec::new();
    write_mask(&mut buf, mask)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_mask(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn lin(v: Array2<f64>) -> SpectroTemporal {
        SpectroTemporal::new(v, Domain::LinearPower)
    }

    fn from_rows(rows: &[&str]) -> BinaryMask {
        let k = rows[0].len();
        BinaryMask::new(Array2::from_shape_fn((rows.len(), k), |(t, c)| {
            rows[t].as_bytes()[c] == b'1'
        }))
    }

    #[test]
    fn oracle_basic_cases() {
        let floor = 1e-10;
        let m = oracle_mask(
            &lin(Array2::from_elem((4, 3), 1.0)),
            &lin(Array2::from_elem((4, 3), floor)),
            OracleThreshold::default(),
        )
        .unwrap();
        assert!(m.values.iter().all(|&v| v));
        let m = oracle_mask(
            &lin(Array2::from_elem((4, 3), floor)),
            &lin(Array2::from_elem((4, 3), 1.0)),
            OracleThreshold::default(),
        )
        .unwrap();
        assert!(m.values.iter().all(|&v| !v));
        let m = oracle_mask(
            &lin(array![[4.0, 1.0, 2.0]]),
            &lin(array![[1.0, 4.0, 2.0]]),
            OracleThreshold::default(),
        )
        .unwrap();
        // equal energies tie → reliable
        assert_eq!(m.values, array![[true, false, true]]);
    }

    #[test]
    fn oracle_rejects_bad_inputs() {
        let a = lin(Array2::from_elem((2, 3), 1.0));
        let b = lin(Array2::from_elem((3, 3), 1.0));
        assert!(matches!(
            oracle_mask(&a, &b, OracleThreshold::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let l = SpectroTemporal::new(Array2::zeros((2, 3)), Domain::Log);
        assert!(matches!(
            oracle_mask(&a, &l, OracleThreshold::default()),
            Err(Error::WrongDomain { .. })
        ));
    }

    #[test]
    fn delta_and_rule() {
        let d = DeltaConfig::default();
        let all = BinaryMask::new(Array2::from_elem((9, 4), true));
        assert!(delta_mask(&all, &d, DeltaRule::And).unwrap().iter().all(|&v| v));
        let none = BinaryMask::new(Array2::from_elem((9, 4), false));
        assert!(delta_mask(&none, &d, DeltaRule::And).unwrap().iter().all(|&v| !v));

        let mut one_hole = all.clone();
        one_hole.values[[4, 1]] = false;
        let dm = delta_mask(&one_hole, &d, DeltaRule::And).unwrap();
        for t in 0..9 {
            for k in 0..4 {
                let expect = !(k == 1 && (2..=6).contains(&t));
                assert_eq!(dm[[t, k]], expect, "cell ({t},{k})");
            }
        }
        // OR rule: a single reliable cell spreads over its window
        let mut single = none.clone();
        single.values[[0, 2]] = true;
        let dm = delta_mask(&single, &d, DeltaRule::Or).unwrap();
        let reliable: Vec<(usize, usize)> = dm.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        assert_eq!(reliable, vec![(0, 2), (1, 2), (2, 2)]);
    }

    #[test]
    fn isolated_counts() {
        assert_eq!(count_isolated_reliable(&from_rows(&["000", "010", "000"])), 1);
        assert_eq!(count_isolated_reliable(&from_rows(&["0110"])), 0);
        assert_eq!(count_isolated_reliable(&from_rows(&["101", "010", "101"])), 5);
        assert_eq!(count_isolated_reliable(&from_rows(&["111", "111"])), 0);
    }

    #[test]
    fn known_byte_layout() {
        // 2×3: row0 = 1 0 1, row1 = 1 1 0 → bits (LSB first) 1,0,1,1,1,0 = 0b011101
        let mut m = from_rows(&["101", "110"]);
        let mut buf = Vec::new();
        write_mask(&mut buf, &m).unwrap();
        assert_eq!(buf, vec![b'M', b'A', b'S', b'K', 2, 0, 0, 0, 3, 0, 0, 0, 0, 0b0001_1101]);
        m.delta = Some(from_rows(&["000", "001"]).values);
        buf.clear();
        write_mask(&mut buf, &m).unwrap();
        assert_eq!(&buf[12..], &[1, 0b0001_1101, 0b0010_0000]);
        assert_eq!(read_mask(&buf[..]).unwrap(), m);
    }

    #[test]
    fn io_validation() {
        let empty = BinaryMask::new(Array2::from_elem((0, 3), true));
        assert!(write_mask(Vec::new(), &empty).is_err());
        assert!(read_mask(&b"MASX\x01\0\0\0\x01\0\0\0\0\x01"[..]).is_err());
        // header says 2×8 (2 bytes) but only 1 byte follows
        assert!(matches!(
            read_mask(&b"MASK\x02\0\0\0\x08\0\0\0\0\xff"[..]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..10, any::<bool>()).prop_flat_map(|(t, k, with_delta)| {
            (
                proptest::collection::vec(any::<bool>(), t * k),
                proptest::collection::vec(any::<bool>(), t * k),
            )
                .prop_map(move |(a, b)| BinaryMask {
                    values: Array2::from_shape_vec((t, k), a).unwrap(),
                    delta: with_delta.then(|| Array2::from_shape_vec((t, k), b).unwrap()),
                })
        })
    }

    proptest! {
        #[test]
        fn io_roundtrip(m in arb_mask()) {
            let mut buf = Vec::new();
            write_mask(&mut buf, &m).unwrap();
            prop_assert_eq!(read_mask(&buf[..]).unwrap(), m);
        }

        #[test]
        fn and_delta_implies_static(m in arb_mask(), w in 1usize..4) {
            let d = DeltaConfig { window_half_width: w };
            let dm = delta_mask(&m, &d, DeltaRule::And).unwrap();
            for (idx, &v) in dm.indexed_iter() {
                prop_assert!(!v || m.values[idx]);
            }
            let isolated = count_isolated_reliable(&m);
            prop_assert!(isolated <= m.reliable_count());
        }

        #[test]
        fn oracle_threshold_monotone_and_scale_invariant(
            cells in proptest::collection::vec((1e-6f64..10.0, 1e-6f64..10.0), 1..40),
            lo in -10.0f64..10.0, step in 0.0f64..10.0, scale in 0.01f64..100.0,
        ) {
            let n = cells.len();
            let s = Array2::from_shape_vec((1, n), cells.iter().map(|c| c.0).collect()).unwrap();
            let z = Array2::from_shape_vec((1, n), cells.iter().map(|c| c.1).collect()).unwrap();
            let low = oracle_mask(&lin(s.clone()), &lin(z.clone()), OracleThreshold { theta_db: lo }).unwrap();
            let high = oracle_mask(&lin(s.clone()), &lin(z.clone()), OracleThreshold { theta_db: lo + step }).unwrap();
            for (a, b) in low.values.iter().zip(high.values.iter()) {
                prop_assert!(!b || *a);
            }
            // power-of-two scaling keeps ratios bit-exact
            let p2 = 2f64.powi(scale.log2().round() as i32);
            let scaled = oracle_mask(&lin(s * p2), &lin(z * p2), OracleThreshold { theta_db: lo }).unwrap();
            prop_assert_eq!(scaled.values, low.values);
        }
    }
}
