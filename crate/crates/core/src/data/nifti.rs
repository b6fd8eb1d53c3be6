//! Minimal NIfTI-1 I/O plus the manifest-based multi-channel exchange format.
//!
//! Supported files: uncompressed single-file NIfTI-1 (`magic "n+1\0"`),
//! single 3-D image, datatype 16 (32-bit float). Canonical output is
//! little-endian; big-endian files are detected through the dim[0] ∈ [1, 7]
//! heuristic and byte-swapped on read. Multi-channel volumes travel between
//! CLI stages as one `.nii` per channel next to a `<stem>.manifest.tsv` of
//! `channel_index<TAB>role` lines.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{ChannelRole, Volume};
use crate::dtype::Real;
use crate::error::DataError;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const DATATYPE_F32: i16 = 16;

/// Write a single-channel, single-item volume as uncompressed little-endian
/// NIfTI-1. Voxels are stored as 32-bit floats; an f32 round trip is
/// bit-exact.
pub fn write_nifti1<T: Real>(vol: &Volume<T>, path: &Path) -> Result<(), DataError> {
    let [b, c, d, h, w] = vol.shape();
    assert!(
        b == 1 && c == 1,
        "contract violation: write_nifti1 takes a single-channel volume, got shape {:?}",
        vol.shape()
    );
    let mut bytes = vec![0u8; VOX_OFFSET + 4 * vol.voxels()];
    LittleEndian::write_i32(&mut bytes[0..4], HEADER_LEN as i32);
    let dim: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut bytes[40 + 2 * i..], *v);
    }
    LittleEndian::write_i16(&mut bytes[70..], DATATYPE_F32);
    LittleEndian::write_i16(&mut bytes[72..], 32); // bitpix
    let pixdim: [f32; 8] = [
        1.0,
        vol.spacing_mm[2] as f32,
        vol.spacing_mm[1] as f32,
        vol.spacing_mm[0] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, v) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut bytes[76 + 4 * i..], *v);
    }
    LittleEndian::write_f32(&mut bytes[108..], VOX_OFFSET as f32);
    bytes[344..348].copy_from_slice(b"n+1\0");
    for (i, v) in vol.data().iter().enumerate() {
        LittleEndian::write_f32(&mut bytes[VOX_OFFSET + 4 * i..], v.to_f64() as f32);
    }
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Read an uncompressed NIfTI-1 file into a 1×1×D×H×W volume with role
/// `generic` and spacing taken from pixdim.
pub fn read_nifti1<T: Real>(path: &Path) -> Result<Volume<T>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("{} bytes is shorter than the 348-byte header", bytes.len()),
        });
    }

    // Endianness: dim[0] is the number of dimensions and must be 1..=7; a
    // value outside that range read little-endian means the file is
    // byte-swapped.
    let ndim_le = LittleEndian::read_i16(&bytes[40..42]);
    let swapped = !(1..=7).contains(&ndim_le);
    let rd_i16 = |off: usize| -> i16 {
        if swapped {
            BigEndian::read_i16(&bytes[off..])
        } else {
            LittleEndian::read_i16(&bytes[off..])
        }
    };
    let rd_i32 = |off: usize| -> i32 {
        if swapped {
            BigEndian::read_i32(&bytes[off..])
        } else {
            LittleEndian::read_i32(&bytes[off..])
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        if swapped {
            BigEndian::read_f32(&bytes[off..])
        } else {
            LittleEndian::read_f32(&bytes[off..])
        }
    };

    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("dim[0] = {ndim_le} in either byte order"),
        });
    }
    let sizeof_hdr = rd_i32(0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("sizeof_hdr = {sizeof_hdr}, expected 348"),
        });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("magic {:?}, expected \"n+1\\0\"", String::from_utf8_lossy(magic)),
        });
    }
    if ndim != 3 {
        return Err(DataError::UnsupportedNifti {
            path: path.to_path_buf(),
            reason: format!("dim[0] = {ndim}; only single 3-D images are supported"),
        });
    }
    let datatype = rd_i16(70);
    if datatype != DATATYPE_F32 {
        return Err(DataError::UnsupportedNifti {
            path: path.to_path_buf(),
            reason: format!("datatype = {datatype}; only 32-bit float (code 16) is supported"),
        });
    }
    let (nx, ny, nz) = (rd_i16(42), rd_i16(44), rd_i16(46));
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("non-positive image dims ({nx}, {ny}, {nz})"),
        });
    }
    let (w, h, d) = (nx as usize, ny as usize, nz as usize);
    let vox_offset = rd_f32(108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(DataError::NotNifti {
            path: path.to_path_buf(),
            reason: format!("vox_offset = {vox_offset}, expected ≥ 348"),
        });
    }
    let offset = vox_offset as usize;
    let expected = 4 * w * h * d;
    let found = bytes.len().saturating_sub(offset);
    if found < expected {
        return Err(DataError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }

    let payload = &bytes[offset..offset + expected];
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|chunk| {
            let v = if swapped {
                BigEndian::read_f32(chunk)
            } else {
                LittleEndian::read_f32(chunk)
            };
            T::from_f64(v as f64)
        })
        .collect();

    // pixdim (sw, sh, sd); unset spacing components default to 1 mm.
    let spacing = |i: usize| -> f64 {
        let v = rd_f32(76 + 4 * i) as f64;
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    };
    Ok(Volume::new(
        data,
        [1, 1, d, h, w],
        [spacing(3), spacing(2), spacing(1)],
        vec![ChannelRole::Generic],
    ))
}

fn channel_path(dir: &Path, stem: &str, c: usize) -> PathBuf {
    dir.join(format!("{stem}_c{c}.nii"))
}

fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.manifest.tsv"))
}

/// Write a multi-channel single-item volume as one NIfTI file per channel
/// plus a `<stem>.manifest.tsv` mapping channel index to role.
pub fn save_volume<T: Real>(vol: &Volume<T>, dir: &Path, stem: &str) -> Result<(), DataError> {
    let [b, c, _, _, _] = vol.shape();
    assert!(b == 1, "contract violation: save_volume takes a single-item volume");
    let mut manifest = String::new();
    for ch in 0..c {
        write_nifti1(&vol.single_channel(0, ch), &channel_path(dir, stem, ch))?;
        manifest.push_str(&format!("{ch}\t{}\n", vol.roles[ch]));
    }
    let mpath = manifest_path(dir, stem);
    fs::write(&mpath, manifest).map_err(|e| DataError::io(mpath.clone(), e))
}

/// Load a volume written by [`save_volume`]: parse the manifest, read the
/// per-channel files in index order and reassemble.
pub fn load_volume<T: Real>(dir: &Path, stem: &str) -> Result<Volume<T>, DataError> {
    let mpath = manifest_path(dir, stem);
    let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(mpath.clone(), e))?;
    let mut entries: Vec<(usize, ChannelRole)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::BadManifest {
            path: mpath.clone(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let (idx, role) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `channel_index<TAB>role`".into()))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad channel index {idx:?}")))?;
        let role = ChannelRole::parse(role.trim())
            .ok_or_else(|| bad(format!("unknown role {:?}", role.trim())))?;
        entries.push((idx, role));
    }
    if entries.is_empty() {
        return Err(DataError::BadManifest {
            path: mpath.clone(),
            reason: "no channel entries".into(),
        });
    }
    entries.sort_by_key(|(idx, _)| *idx);
    for (want, (idx, _)) in entries.iter().enumerate() {
        if *idx != want {
            return Err(DataError::BadManifest {
                path: mpath.clone(),
                reason: format!("channel indices must be dense from 0; missing {want}"),
            });
        }
    }

    let mut channels: Vec<Volume<T>> = Vec::with_capacity(entries.len());
    for (idx, _) in &entries {
        channels.push(read_nifti1(&channel_path(dir, stem, *idx))?);
    }
    let extent = channels[0].extent();
    let spacing = channels[0].spacing_mm;
    let mut data = Vec::with_capacity(channels.len() * channels[0].voxels());
    for (ch, vol) in channels.iter().enumerate() {
        if vol.extent() != extent {
            return Err(DataError::BadManifest {
                path: mpath.clone(),
                reason: format!(
                    "channel {ch} extent {:?} does not match channel 0 extent {:?}",
                    vol.extent(),
                    extent
                ),
            });
        }
        data.extend_from_slice(vol.data());
    }
    let roles: Vec<ChannelRole> = entries.iter().map(|(_, r)| *r).collect();
    let [d, h, w] = extent;
    Ok(Volume::new(data, [1, roles.len(), d, h, w], spacing, roles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_volume(seed: u64) -> Volume<f32> {
        let mut rng = substream(seed, "nifti-test");
        let data: Vec<f32> = (0..512).map(|_| rng.gen_range(-10.0..10.0)).collect();
        Volume::new(data, [1, 1, 8, 8, 8], [1.5, 1.25, 1.0], vec![ChannelRole::Generic])
    }

    #[test]
    fn round_trip_preserves_every_bit_and_the_spacing() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("vol.nii");
        let vol = random_volume(1);
        write_nifti1(&vol, &path).expect("write");
        let back: Volume<f32> = read_nifti1(&path).expect("read");
        assert_eq!(back.shape(), vol.shape());
        assert_eq!(back.spacing_mm, vol.spacing_mm);
        assert!(
            vol.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "payload must survive bit-exactly"
        );
    }

    #[test]
    fn wrong_magic_is_rejected_naming_the_magic_field() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("vol.nii");
        write_nifti1(&random_volume(2), &path).expect("write");
        let mut bytes = std::fs::read(&path).expect("read bytes");
        bytes[344..348].copy_from_slice(b"ni1\0");
        std::fs::write(&path, bytes).expect("rewrite");
        match read_nifti1::<f32>(&path) {
            Err(DataError::NotNifti { reason, .. }) => {
                assert!(reason.contains("magic"), "reason should name the field: {reason}")
            }
            other => panic!("expected NotNifti, got {other:?}"),
        }
    }

    #[test]
    fn integer_datatypes_are_rejected_naming_the_datatype_field() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("vol.nii");
        write_nifti1(&random_volume(3), &path).expect("write");
        let mut bytes = std::fs::read(&path).expect("read bytes");
        LittleEndian::write_i16(&mut bytes[70..], 4); // 16-bit signed int
        std::fs::write(&path, bytes).expect("rewrite");
        match read_nifti1::<f32>(&path) {
            Err(DataError::UnsupportedNifti { reason, .. }) => {
                assert!(reason.contains("datatype = 4"), "got: {reason}")
            }
            other => panic!("expected UnsupportedNifti, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_expected_and_found_bytes() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("vol.nii");
        write_nifti1(&random_volume(4), &path).expect("write");
        let bytes = std::fs::read(&path).expect("read bytes");
        std::fs::write(&path, &bytes[..VOX_OFFSET + 40]).expect("truncate");
        match read_nifti1::<f32>(&path) {
            Err(DataError::TruncatedPayload { expected, found, .. }) => {
                assert_eq!(expected, 4 * 512);
                assert_eq!(found, 40);
            }
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }

    #[test]
    fn big_endian_files_are_detected_and_swapped() {
        let dir = tempfile::tempdir().expect("tempdir");
        let le_path = dir.path().join("le.nii");
        let be_path = dir.path().join("be.nii");
        let vol = random_volume(5);
        write_nifti1(&vol, &le_path).expect("write");
        let le = std::fs::read(&le_path).expect("read bytes");

        // Build the byte-swapped twin by reversing every multi-byte field.
        let mut be = le.clone();
        be[0..4].reverse(); // sizeof_hdr
        for i in 0..8 {
            be[40 + 2 * i..42 + 2 * i].reverse(); // dim
            be[76 + 4 * i..80 + 4 * i].reverse(); // pixdim
        }
        be[70..72].reverse(); // datatype
        be[72..74].reverse(); // bitpix
        be[108..112].reverse(); // vox_offset
        for i in (VOX_OFFSET..be.len()).step_by(4) {
            be[i..i + 4].reverse();
        }
        std::fs::write(&be_path, be).expect("write BE");

        let back: Volume<f32> = read_nifti1(&be_path).expect("byte-swapped read");
        assert_eq!(back.spacing_mm, vol.spacing_mm);
        assert!(
            vol.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "swapped payload must decode to the same values"
        );
    }

    #[test]
    fn manifest_round_trip_reassembles_channels_and_roles() {
        let dir = tempfile::tempdir().expect("tempdir");
        let vol: Volume<f32> =
            crate::data::generate_phantom(&crate::data::PhantomSpec::sized(8, 11));
        save_volume(&vol, dir.path(), "item").expect("save");
        let back: Volume<f32> = load_volume(dir.path(), "item").expect("load");
        assert_eq!(back.shape(), vol.shape());
        assert_eq!(back.roles, vol.roles);
        for (a, b) in vol.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "channel payloads must survive");
        }
    }

    #[test]
    fn manifest_with_a_gap_in_channel_indices_is_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let vol = random_volume(6);
        save_volume(&vol, dir.path(), "item").expect("save");
        std::fs::write(dir.path().join("item.manifest.tsv"), "0\tgeneric\n2\tgeneric\n")
            .expect("rewrite manifest");
        match load_volume::<f32>(dir.path(), "item") {
            Err(DataError::BadManifest { reason, .. }) => {
                assert!(reason.contains("dense"), "got: {reason}")
            }
            other => panic!("expected BadManifest, got {other:?}"),
        }
    }
}
