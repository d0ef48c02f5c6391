//! Binary containers for datasets, modems and network parameters.
//!
//! All numbers are little-endian. Every container may end with a provenance
//! trailer (`PROV`, seed `u64`, 32-byte config hash) that ties the artifact to
//! the configuration that produced it; loaders accept files without one.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use num_complex::Complex;

use crate::channel::{ChannelRealization, ChannelSpec, Dataset, PathComponent};
use crate::error::{Error, Result};
use crate::modem::Modem;
use crate::modnet::{ModNetArch, ModNetParams};

pub const DATASET_MAGIC: &[u8; 4] = b"DDCH";
pub const MODEM_MAGIC: &[u8; 4] = b"MODM";
pub const PARAMS_MAGIC: &[u8; 4] = b"MNET";
const TRAILER_MAGIC: &[u8; 4] = b"PROV";
const TRAILER_LEN: usize = 4 + 8 + 32;

pub const DATASET_VERSION: u32 = 1;
pub const MODEM_VERSION: u32 = 1;
pub const PARAMS_VERSION: u32 = 1;

/// Relative energy deviation above which a loaded modem is renormalized.
pub const MODEM_ENERGY_TOLERANCE: f64 = 1e-4;

/// Seed and configuration hash stamped on an artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

impl Provenance {
    pub fn hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}

fn write_trailer(buf: &mut Vec<u8>, prov: Option<&Provenance>) {
    if let Some(p) = prov {
        buf.extend_from_slice(TRAILER_MAGIC);
        buf.write_u64::<LE>(p.seed).unwrap();
        buf.extend_from_slice(&p.config_hash);
    }
}

/// Splits a file into its body and optional provenance trailer.
fn split_trailer(bytes: &[u8]) -> (&[u8], Option<Provenance>) {
    if bytes.len() >= TRAILER_LEN {
        let (body, tail) = bytes.split_at(bytes.len() - TRAILER_LEN);
        if &tail[..4] == TRAILER_MAGIC {
            let seed = u64::from_le_bytes(tail[4..12].try_into().unwrap());
            let config_hash = tail[12..].try_into().unwrap();
            return (body, Some(Provenance { seed, config_hash }));
        }
    }
    (bytes, None)
}

fn corrupt(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("{what}: file is truncated")),
        _ => Error::Corrupt(format!("{what}: {e}")),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(format!("{} does not exist", path.display())),
        _ => Error::Io(e),
    })
}

fn check_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got).map_err(corrupt(what))?;
    if &got != magic {
        return Err(Error::Corrupt(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn check_version(cur: &mut Cursor<&[u8]>, expected: u32, what: &str) -> Result<()> {
    let v = cur.read_u32::<LE>().map_err(corrupt(what))?;
    if v != expected {
        return Err(Error::Corrupt(format!("{what}: unsupported version {v}")));
    }
    Ok(())
}

fn check_consumed(cur: &Cursor<&[u8]>, what: &str) -> Result<()> {
    let extra = cur.get_ref().len() as u64 - cur.position();
    if extra != 0 {
        return Err(Error::Corrupt(format!("{what}: {extra} unexpected trailing bytes")));
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit the file format")))
}

pub fn encode_dataset(data: &Dataset, prov: Option<&Provenance>) -> Result<Vec<u8>> {
    let spec = &data.spec;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.write_u32::<LE>(DATASET_VERSION)?;
    buf.write_u32::<LE>(to_u32(spec.num_subcarriers, "subcarrier count")?)?;
    buf.write_u32::<LE>(to_u32(spec.prefix_len, "prefix length")?)?;
    buf.write_u32::<LE>(to_u32(spec.num_paths, "path count")?)?;
    buf.write_u64::<LE>(data.len() as u64)?;
    for v in [
        spec.carrier_freq_hz,
        spec.subcarrier_spacing_hz,
        spec.ue_speed_mps,
        spec.max_delay_grid as f64,
    ] {
        buf.write_f64::<LE>(v)?;
    }
    for r in &data.realizations {
        if r.paths.len() != spec.num_paths {
            return Err(Error::Dimension(format!(
                "realization has {} paths, dataset spec says {}",
                r.paths.len(),
                spec.num_paths
            )));
        }
        for p in &r.paths {
            buf.write_f64::<LE>(p.gain.re)?;
            buf.write_f64::<LE>(p.gain.im)?;
            buf.write_u32::<LE>(to_u32(p.delay_grid, "delay")?)?;
            buf.write_f64::<LE>(p.doppler_hz)?;
        }
    }
    write_trailer(&mut buf, prov);
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, Option<Provenance>)> {
    const WHAT: &str = "dataset";
    let (body, prov) = split_trailer(bytes);
    let mut cur = Cursor::new(body);
    check_magic(&mut cur, DATASET_MAGIC, WHAT)?;
    check_version(&mut cur, DATASET_VERSION, WHAT)?;
    let e = corrupt(WHAT);
    let m = cur.read_u32::<LE>().map_err(&e)? as usize;
    let m_p = cur.read_u32::<LE>().map_err(&e)? as usize;
    let n_p = cur.read_u32::<LE>().map_err(&e)? as usize;
    let count = cur.read_u64::<LE>().map_err(&e)?;
    let carrier_freq_hz = cur.read_f64::<LE>().map_err(&e)?;
    let subcarrier_spacing_hz = cur.read_f64::<LE>().map_err(&e)?;
    let ue_speed_mps = cur.read_f64::<LE>().map_err(&e)?;
    let l_max = cur.read_f64::<LE>().map_err(&e)?;
    if l_max.fract() != 0.0 || l_max < 0.0 {
        return Err(Error::Corrupt(format!("{WHAT}: maximum delay {l_max} is not a grid index")));
    }
    let spec = ChannelSpec {
        carrier_freq_hz,
        subcarrier_spacing_hz,
        num_subcarriers: m,
        prefix_len: m_p,
        ue_speed_mps,
        num_paths: n_p,
        max_delay_grid: l_max as usize,
    };
    spec.validate()
        .map_err(|err| Error::Corrupt(format!("{WHAT}: invalid header: {err}")))?;
    let record = 8 + 8 + 4 + 8;
    let remaining = body.len() as u64 - cur.position();
    if count.checked_mul((n_p * record) as u64) != Some(remaining) {
        return Err(Error::Corrupt(format!(
            "{WHAT}: header promises {count} samples but {remaining} bytes of records follow"
        )));
    }
    let mut realizations = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut paths = Vec::with_capacity(n_p);
        for _ in 0..n_p {
            let re = cur.read_f64::<LE>().map_err(&e)?;
            let im = cur.read_f64::<LE>().map_err(&e)?;
            let l = cur.read_u32::<LE>().map_err(&e)? as usize;
            let nu = cur.read_f64::<LE>().map_err(&e)?;
            paths.push(PathComponent::new(&spec, Complex::new(re, im), l, nu));
        }
        realizations.push(
            ChannelRealization::new(spec.clone(), paths)
                .map_err(|err| Error::Corrupt(format!("{WHAT}: {err}")))?,
        );
    }
    check_consumed(&cur, WHAT)?;
    Ok((Dataset { spec, realizations }, prov))
}

pub fn save_dataset(path: &Path, data: &Dataset, prov: Option<&Provenance>) -> Result<()> {
    write_file(path, &encode_dataset(data, prov)?)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<Provenance>)> {
    decode_dataset(&read_file(path)?)
}

pub fn encode_modem(modem: &Modem<f64>, prov: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEM_MAGIC);
    buf.write_u32::<LE>(MODEM_VERSION)?;
    buf.write_u32::<LE>(to_u32(modem.num_subcarriers(), "subcarrier count")?)?;
    buf.write_u32::<LE>(to_u32(modem.frame_len(), "frame length")?)?;
    for z in modem.phi().iter().chain(modem.psi_h().iter()) {
        buf.write_f64::<LE>(z.re)?;
        buf.write_f64::<LE>(z.im)?;
    }
    write_trailer(&mut buf, prov);
    Ok(buf)
}

/// Decodes a modem, renormalizing (with a warning) when its energies are off
/// by more than [`MODEM_ENERGY_TOLERANCE`].
pub fn decode_modem(bytes: &[u8]) -> Result<(Modem<f64>, Option<Provenance>)> {
    const WHAT: &str = "modem";
    let (body, prov) = split_trailer(bytes);
    let mut cur = Cursor::new(body);
    check_magic(&mut cur, MODEM_MAGIC, WHAT)?;
    check_version(&mut cur, MODEM_VERSION, WHAT)?;
    let e = corrupt(WHAT);
    let m = cur.read_u32::<LE>().map_err(&e)? as usize;
    let m_l = cur.read_u32::<LE>().map_err(&e)? as usize;
    if m == 0 || m_l < m {
        return Err(Error::Corrupt(format!("{WHAT}: invalid dimensions M={m}, M_L={m_l}")));
    }
    let expected = 2 * m * m_l * 16;
    if (body.len() as u64 - cur.position()) as usize != expected {
        return Err(Error::Corrupt(format!("{WHAT}: file is truncated or padded")));
    }
    let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<Complex<f64>>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let re = cur.read_f64::<LE>().map_err(&e)?;
            let im = cur.read_f64::<LE>().map_err(&e)?;
            data.push(Complex::new(re, im));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).unwrap())
    };
    let phi = read_matrix(m_l, m)?;
    let psi_h = read_matrix(m, m_l)?;
    let modem = Modem::new(phi, psi_h)?;
    let err = modem.energy_error();
    let modem = if err > MODEM_ENERGY_TOLERANCE {
        log::warn!("modem energies deviate by {err:.3e} from their targets; renormalizing");
        modem.normalized()?
    } else {
        modem
    };
    Ok((modem, prov))
}

pub fn save_modem(path: &Path, modem: &Modem<f64>, prov: Option<&Provenance>) -> Result<()> {
    write_file(path, &encode_modem(modem, prov)?)
}

pub fn load_modem(path: &Path) -> Result<(Modem<f64>, Option<Provenance>)> {
    decode_modem(&read_file(path)?)
}

fn write_usizes(buf: &mut Vec<u8>, values: &[usize], what: &str) -> Result<()> {
    buf.write_u32::<LE>(to_u32(values.len(), what)?)?;
    for &v in values {
        buf.write_u32::<LE>(to_u32(v, what)?)?;
    }
    Ok(())
}

fn read_usizes(cur: &mut Cursor<&[u8]>, what: &str) -> Result<Vec<usize>> {
    let e = corrupt(what);
    let n = cur.read_u32::<LE>().map_err(&e)? as usize;
    if n > 1 << 16 {
        return Err(Error::Corrupt(format!("{what}: implausible list length {n}")));
    }
    (0..n).map(|_| Ok(cur.read_u32::<LE>().map_err(&e)? as usize)).collect()
}

pub fn encode_params(params: &ModNetParams<f32>, prov: Option<&Provenance>) -> Result<Vec<u8>> {
    let arch = params.arch();
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.write_u32::<LE>(PARAMS_VERSION)?;
    buf.write_u32::<LE>(to_u32(arch.frame_len, "frame length")?)?;
    buf.write_u32::<LE>(to_u32(arch.num_subcarriers, "subcarrier count")?)?;
    buf.write_u32::<LE>(to_u32(arch.conv_kernel, "kernel")?)?;
    write_usizes(&mut buf, &arch.conv_channels, "conv widths")?;
    write_usizes(&mut buf, &arch.fc_widths, "dense widths")?;
    buf.write_f64::<LE>(arch.leaky_slope)?;
    buf.write_f64::<LE>(arch.bn_eps)?;
    buf.write_f64::<LE>(arch.bn_momentum)?;
    buf.write_u64::<LE>(params.init_seed())?;
    let tensors = params.named_tensors();
    buf.write_u32::<LE>(to_u32(tensors.len(), "tensor count")?)?;
    for (name, shape, data) in tensors {
        buf.write_u32::<LE>(to_u32(name.len(), "name length")?)?;
        buf.extend_from_slice(name.as_bytes());
        write_usizes(&mut buf, &shape, "tensor shape")?;
        for v in data {
            buf.write_f32::<LE>(v)?;
        }
    }
    write_trailer(&mut buf, prov);
    Ok(buf)
}

pub fn decode_params(bytes: &[u8]) -> Result<(ModNetParams<f32>, Option<Provenance>)> {
    const WHAT: &str = "parameters";
    let (body, prov) = split_trailer(bytes);
    let mut cur = Cursor::new(body);
    check_magic(&mut cur, PARAMS_MAGIC, WHAT)?;
    check_version(&mut cur, PARAMS_VERSION, WHAT)?;
    let e = corrupt(WHAT);
    let frame_len = cur.read_u32::<LE>().map_err(&e)? as usize;
    let num_subcarriers = cur.read_u32::<LE>().map_err(&e)? as usize;
    let conv_kernel = cur.read_u32::<LE>().map_err(&e)? as usize;
    let conv_channels = read_usizes(&mut cur, WHAT)?;
    let fc_widths = read_usizes(&mut cur, WHAT)?;
    let arch = ModNetArch {
        frame_len,
        num_subcarriers,
        conv_kernel,
        conv_channels,
        fc_widths,
        leaky_slope: cur.read_f64::<LE>().map_err(&e)?,
        bn_eps: cur.read_f64::<LE>().map_err(&e)?,
        bn_momentum: cur.read_f64::<LE>().map_err(&e)?,
    };
    arch.validate()
        .map_err(|err| Error::Corrupt(format!("{WHAT}: invalid architecture header: {err}")))?;
    let init_seed = cur.read_u64::<LE>().map_err(&e)?;
    let count = cur.read_u32::<LE>().map_err(&e)? as usize;
    if count > 1 << 16 {
        return Err(Error::Corrupt(format!("{WHAT}: implausible tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.read_u32::<LE>().map_err(&e)? as usize;
        if len > 1 << 10 {
            return Err(Error::Corrupt(format!("{WHAT}: implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name).map_err(&e)?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt(format!("{WHAT}: tensor name is not UTF-8")))?;
        let shape = read_usizes(&mut cur, WHAT)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if (n as u64) * 4 <= body.len() as u64 - cur.position() => n,
            _ => return Err(Error::Corrupt(format!("{WHAT}: tensor {name} is truncated"))),
        };
        let mut data = vec![0f32; n];
        cur.read_f32_into::<LE>(&mut data).map_err(&e)?;
        tensors.push((name, shape, data));
    }
    check_consumed(&cur, WHAT)?;
    let params = ModNetParams::from_named_tensors(arch, init_seed, tensors)?;
    Ok((params, prov))
}

pub fn save_params(path: &Path, params: &ModNetParams<f32>, prov: Option<&Provenance>) -> Result<()> {
    write_file(path, &encode_params(params, prov)?)
}

pub fn load_params(path: &Path) -> Result<(ModNetParams<f32>, Option<Provenance>)> {
    decode_params(&read_file(path)?)
}

/// Loads parameters and checks they were built for `arch`.
pub fn load_params_for(path: &Path, arch: &ModNetArch) -> Result<(ModNetParams<f32>, Option<Provenance>)> {
    let (params, prov) = load_params(path)?;
    if params.arch() != arch {
        return Err(Error::ArchMismatch(format!(
            "{} holds a network for M={}, M_L={}, conv {:?}, dense {:?}; expected M={}, M_L={}, conv {:?}, dense {:?}",
            path.display(),
            params.arch().num_subcarriers,
            params.arch().frame_len,
            params.arch().conv_channels,
            params.arch().fc_widths,
            arch.num_subcarriers,
            arch.frame_len,
            arch.conv_channels,
            arch.fc_widths
        )));
    }
    Ok((params, prov))
}

/// Writes through a temporary sibling so readers never observe a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_dataset;
    use crate::modnet::init_modnet;

    fn prov() -> Provenance {
        Provenance {
            seed: 42,
            config_hash: [7u8; 32],
        }
    }

    fn small_spec() -> ChannelSpec {
        ChannelSpec {
            num_subcarriers: 8,
            prefix_len: 2,
            max_delay_grid: 2,
            ..ChannelSpec::default()
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = generate_dataset(&small_spec(), 5, 3).unwrap();
        for p in [None, Some(prov())] {
            let bytes = encode_dataset(&data, p.as_ref()).unwrap();
            let (back, got) = decode_dataset(&bytes).unwrap();
            assert_eq!(back, data);
            assert_eq!(got, p);
        }
    }

    #[test]
    fn dataset_header_layout() {
        let data = generate_dataset(&small_spec(), 2, 3).unwrap();
        let bytes = encode_dataset(&data, None).unwrap();
        assert_eq!(&bytes[..4], b"DDCH");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 28 + 4 * 8 + 2 * 4 * 28);
    }

    #[test]
    fn truncated_dataset_is_corrupt() {
        let data = generate_dataset(&small_spec(), 3, 3).unwrap();
        let bytes = encode_dataset(&data, None).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
    }

    #[test]
    fn modem_round_trip_is_exact() {
        let m = Modem::<f64>::ofdm(8, 2);
        let (back, p) = decode_modem(&encode_modem(&m, Some(&prov())).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(p, Some(prov()));
        assert_eq!(encode_modem(&m, None).unwrap().len(), 16 + 2 * 8 * 10 * 16);
    }

    #[test]
    fn modem_with_wrong_energy_is_renormalized() {
        let m = Modem::<f64>::ofdm(4, 1);
        let (phi, psi) = m.clone().into_parts();
        let scaled = Modem::new(phi.mapv(|z| z * 3.0), psi).unwrap();
        let (back, _) = decode_modem(&encode_modem(&scaled, None).unwrap()).unwrap();
        assert!(back.energy_error() < 1e-12);
        for (a, b) in back.phi().iter().zip(m.phi()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn bad_modem_files() {
        let bytes = encode_modem(&Modem::<f64>::ofdm(4, 1), None).unwrap();
        assert!(matches!(decode_modem(&bytes[..bytes.len() - 8]), Err(Error::Corrupt(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_modem(&wrong), Err(Error::Corrupt(_))));
    }

    fn tiny_arch() -> ModNetArch {
        ModNetArch {
            conv_kernel: 3,
            conv_channels: vec![2, 2, 2],
            ..ModNetArch::new(4, 1)
        }
        .with_hidden_width(6)
    }

    #[test]
    fn params_round_trip_is_exact() {
        let p = init_modnet::<f32>(&tiny_arch(), 9).unwrap();
        let (back, prov_back) = decode_params(&encode_params(&p, Some(&prov())).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(prov_back, Some(prov()));
    }

    #[test]
    fn params_truncation_and_arch_mismatch() {
        let p = init_modnet::<f32>(&tiny_arch(), 9).unwrap();
        let bytes = encode_params(&p, None).unwrap();
        for cut in [2, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_params(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_params(&path, &p, None).unwrap();
        let other = ModNetArch::new(5, 1);
        assert!(matches!(load_params_for(&path, &other), Err(Error::ArchMismatch(_))));
        assert!(load_params_for(&path, &tiny_arch()).is_ok());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_modem(Path::new("/nonexistent/modem.bin")).unwrap_err();
        assert_eq!(err.class(), "missing-input");
    }
}
