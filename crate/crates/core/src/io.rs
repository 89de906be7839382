//! Grid files, scene files and image exports.
//!
//! Grid file layout (little-endian): `"EOMG"`, version `u16`, dtype tag
//! `u8` (0 = u8, 1 = f32), height `u32`, width `u32`, then the row-major
//! payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::raster::{Channel, RasterImage};
use crate::scene::Scene;

const GRID_MAGIC: &[u8; 4] = b"EOMG";
const GRID_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4;

/// Element types storable in a grid file.
pub trait GridElement: Copy + sealed::Sealed {
    const TAG: u8;
    const NAME: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
    fn is_finite(self) -> bool {
        true
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for u8 {}
    impl Sealed for f32 {}
}

impl GridElement for u8 {
    const TAG: u8 = 0;
    const NAME: &'static str = "u8";
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl GridElement for f32 {
    const TAG: u8 = 1;
    const NAME: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

fn tag_name(tag: u8) -> &'static str {
    match tag {
        0 => "u8",
        1 => "f32",
        _ => "unknown",
    }
}

pub fn encode_grid<T: GridElement>(grid: &Grid<T>) -> Result<Vec<u8>> {
    if let Some(i) = grid.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!("non-finite grid value at index {i}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * T::SIZE);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(T::TAG);
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.as_slice() {
        v.put(&mut out);
    }
    Ok(out)
}

/// Dtype tag of an encoded grid, after validating the header.
pub fn grid_dtype(bytes: &[u8]) -> Result<&'static str> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != GRID_MAGIC {
            return Err(Error::BadMagic);
        }
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GRID_VERSION {
        return Err(Error::Version(version));
    }
    Ok(tag_name(bytes[6]))
}

pub fn decode_grid<T: GridElement>(bytes: &[u8]) -> Result<Grid<T>> {
    grid_dtype(bytes)?;
    if bytes[6] != T::TAG {
        return Err(Error::DType { expected: T::NAME, found: tag_name(bytes[6]) });
    }
    let h = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + h * w * T::SIZE;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[HEADER_LEN..].chunks_exact(T::SIZE).map(T::get).collect();
    Grid::from_vec(h, w, data)
}

pub fn write_grid<T: GridElement>(grid: &Grid<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_grid(grid)?)
}

pub fn read_grid<T: GridElement>(path: &Path) -> Result<Grid<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_json<S: serde::Serialize + ?Sized>(value: &S, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Scene files hold a JSON array of scenes; each is validated on load.
pub fn write_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    write_json(scenes, path)
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = read_json(path)?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}

/// Binary greyscale PGM. Earlier is darker: a value `v` on `[0, max]`
/// maps to `255·v/max`.
pub fn encode_pgm(grid: &Grid<f32>, max: f32) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|&v| {
        let s = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        (s * 255.0).round() as u8
    }));
    out
}

/// Binary mask as PGM, set pixels white.
pub fn encode_mask_pgm(grid: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

/// RGB view of a raster: red for other agents, green for the ego history,
/// blue for the map layers.
pub fn encode_raster_ppm(raster: &RasterImage) -> Vec<u8> {
    let (h, w) = (raster.height(), raster.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for r in 0..h {
        for c in 0..w {
            let red = raster.get(Channel::VehicleHistory, r, c).max(raster.get(Channel::PedestrianHistory, r, c));
            let green = raster.get(Channel::EgoHistory, r, c);
            let blue = 0.35 * raster.get(Channel::Drivable, r, c) + 0.65 * raster.get(Channel::Lanes, r, c);
            out.extend_from_slice(&[to_u8(red), to_u8(green), to_u8(blue)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_bitwise() {
        let g = Grid::from_vec(2, 2, vec![0.0f32, -0.0, 1.5e-42, 30.0]).unwrap();
        let bytes = encode_grid(&g).unwrap();
        let back: Grid<f32> = decode_grid(&bytes).unwrap();
        let bits = |g: &Grid<f32>| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
        assert_eq!(encode_grid(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/mask.eomg");
        let g = Grid::from_fn(3, 5, |r, c| ((r + c) % 2) as u8);
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid::<u8>(&path).unwrap(), g);
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn header_errors() {
        let g = Grid::filled(2, 3, 1.0f32);
        let bytes = encode_grid(&g).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        let err = decode_grid::<f32>(&bad).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
        assert!(matches!(decode_grid::<u8>(&bytes), Err(Error::DType { expected: "u8", found: "f32" })));
        assert!(matches!(decode_grid::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_grid::<f32>(&bytes[..5]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_grid::<f32>(&bad), Err(Error::Version(2))));
        assert!(encode_grid(&Grid::filled(1, 1, f32::NAN)).is_err());
    }

    #[test]
    fn pgm_darker_is_earlier() {
        let g = Grid::from_vec(1, 3, vec![0.0f32, 15.0, 30.0]).unwrap();
        let pgm = encode_pgm(&g, 30.0);
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }
}
