//! Scene dataset serialization.
//!
//! A dataset directory holds `scene_%06d.xds` files plus a `manifest.txt`
//! listing one scene filename per line, written last.
//!
//! `.xds` layout, little-endian: magic "XDS1"; u32 version=1; lidar spec
//! (u32 H_r, u32 W_r, f64 r_max, f64 beams[H_r]); u32 V; per camera
//! (f64 R[9] row-major, f64 t[3], f64 K[9], u32 W, u32 H); range image
//! f32[H_r*W_r*2]; per view image f32[H*W*3] then depth f32[H*W] (IEEE
//! +inf for sky); u32 num_boxes; per box (f64 center[3], f64 size[3],
//! f64 yaw, u32 category_id, f64 albedo); u32 num_tags; u32 tag_ids[].

use super::{
    BrightnessTag, Category, OrientedBox, SceneRecord, SceneTags, WeatherTag,
};
use crate::geometry::{CameraParams, CameraRig, LidarSpec, Mat3, Point3, RangeImage};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"XDS1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{section} at byte {offset}: {msg}")]
    Corrupt {
        section: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("missing section `{0}` (file truncated)")]
    Truncated(&'static str),
    #[error("manifest lists {listed} scenes but {found} were readable")]
    ManifestMismatch { listed: usize, found: usize },
}

/// Tracks the read position and the section being decoded, so corrupt files
/// are rejected with the position of the first inconsistency.
struct Reader<R> {
    inner: R,
    pos: u64,
    section: &'static str,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Self {
            inner,
            pos: 0,
            section: "header",
        }
    }

    fn enter(&mut self, section: &'static str) {
        self.section = section;
    }

    fn corrupt(&self, msg: impl Into<String>) -> DataError {
        DataError::Corrupt {
            section: self.section,
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn map_eof(&self, e: std::io::Error) -> DataError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated(self.section)
        } else {
            DataError::Io(e)
        }
    }

    fn read_u32(&mut self) -> Result<u32, DataError> {
        let v = self
            .inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.map_eof(e))?;
        self.pos += 4;
        Ok(v)
    }

    fn read_f64(&mut self) -> Result<f64, DataError> {
        let v = self
            .inner
            .read_f64::<LittleEndian>()
            .map_err(|e| self.map_eof(e))?;
        self.pos += 8;
        Ok(v)
    }

    fn read_f32_vec(&mut self, n: usize) -> Result<Vec<f32>, DataError> {
        let mut out = vec![0f32; n];
        self.inner
            .read_f32_into::<LittleEndian>(&mut out)
            .map_err(|e| self.map_eof(e))?;
        self.pos += 4 * n as u64;
        Ok(out)
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), DataError> {
        self.inner.read_exact(buf).map_err(|e| self.map_eof(e))?;
        self.pos += buf.len() as u64;
        Ok(())
    }
}

fn write_mat3<W: Write>(w: &mut W, m: &Mat3) -> std::io::Result<()> {
    for row in &m.0 {
        for &v in row {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Serializes one scene record.
pub fn write_scene(record: &SceneRecord, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;

    let lidar = &record.lidar;
    w.write_u32::<LittleEndian>(lidar.num_beams() as u32)?;
    w.write_u32::<LittleEndian>(lidar.num_azimuth_bins as u32)?;
    w.write_f64::<LittleEndian>(lidar.r_max)?;
    for &b in &lidar.beam_elevations {
        w.write_f64::<LittleEndian>(b)?;
    }

    w.write_u32::<LittleEndian>(record.rig.len() as u32)?;
    for cam in &record.rig.cameras {
        write_mat3(&mut w, &cam.rotation)?;
        for &t in &cam.translation {
            w.write_f64::<LittleEndian>(t)?;
        }
        write_mat3(&mut w, &cam.k_matrix())?;
        w.write_u32::<LittleEndian>(cam.width as u32)?;
        w.write_u32::<LittleEndian>(cam.height as u32)?;
    }

    for &v in record.range_image.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    for (img, depth) in record.images.iter().zip(&record.depth_gt) {
        for &v in img {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in depth {
            w.write_f32::<LittleEndian>(v)?;
        }
    }

    w.write_u32::<LittleEndian>(record.boxes.len() as u32)?;
    for b in &record.boxes {
        for v in [b.center.x, b.center.y, b.center.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in &b.size {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_f64::<LittleEndian>(b.yaw)?;
        w.write_u32::<LittleEndian>(b.category as u32)?;
        w.write_f64::<LittleEndian>(b.albedo)?;
    }

    let ids = record.tags.ids();
    w.write_u32::<LittleEndian>(ids.len() as u32)?;
    for id in ids {
        w.write_u32::<LittleEndian>(id)?;
    }
    w.flush()?;
    Ok(())
}

/// Deserializes one scene record, rejecting corrupt input with the byte
/// position of the first inconsistency.
pub fn read_scene(path: &Path) -> Result<SceneRecord, DataError> {
    let file = fs::File::open(path)?;
    let mut r = Reader::new(BufReader::new(file));

    r.enter("magic");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(r.corrupt(format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    r.enter("version");
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }

    r.enter("lidar spec");
    let h_r = r.read_u32()? as usize;
    let w_r = r.read_u32()? as usize;
    if h_r == 0 || h_r > 4096 || w_r == 0 || w_r > 65536 {
        return Err(r.corrupt(format!("implausible range image size {h_r}x{w_r}")));
    }
    let r_max = r.read_f64()?;
    let mut beams = Vec::with_capacity(h_r);
    for _ in 0..h_r {
        beams.push(r.read_f64()?);
    }
    let lidar = LidarSpec::new(beams, w_r, r_max)
        .map_err(|e| r.corrupt(format!("invalid lidar spec: {e}")))?;

    r.enter("cameras");
    let v = r.read_u32()? as usize;
    if !(2..=64).contains(&v) {
        return Err(r.corrupt(format!("implausible camera count {v}")));
    }
    let mut cams = Vec::with_capacity(v);
    for _ in 0..v {
        let mut rot = [[0.0; 3]; 3];
        for row in rot.iter_mut() {
            for cell in row.iter_mut() {
                *cell = r.read_f64()?;
            }
        }
        let mut t = [0.0; 3];
        for cell in t.iter_mut() {
            *cell = r.read_f64()?;
        }
        let mut k = [[0.0; 3]; 3];
        for row in k.iter_mut() {
            for cell in row.iter_mut() {
                *cell = r.read_f64()?;
            }
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || (k[2][2] - 1.0).abs() > 1e-9 {
            return Err(r.corrupt("intrinsics not upper-triangular".to_string()));
        }
        let width = r.read_u32()? as usize;
        let height = r.read_u32()? as usize;
        if width == 0 || width > 16384 || height == 0 || height > 16384 {
            return Err(r.corrupt(format!("implausible image size {width}x{height}")));
        }
        let cam = CameraParams {
            rotation: Mat3(rot),
            translation: t,
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
            width,
            height,
        };
        cam.validate()
            .map_err(|e| r.corrupt(format!("invalid camera: {e}")))?;
        cams.push(cam);
    }
    let rig = CameraRig::new(cams).map_err(|e| r.corrupt(format!("invalid rig: {e}")))?;

    r.enter("range image");
    let range_data = r.read_f32_vec(h_r * w_r * 2)?;
    let range_image = RangeImage::from_data(lidar.clone(), range_data);

    r.enter("views");
    let mut images = Vec::with_capacity(v);
    let mut depth_gt = Vec::with_capacity(v);
    for cam in &rig.cameras {
        images.push(r.read_f32_vec(cam.height * cam.width * 3)?);
        depth_gt.push(r.read_f32_vec(cam.height * cam.width)?);
    }

    r.enter("boxes");
    let nb = r.read_u32()? as usize;
    if nb > 4096 {
        return Err(r.corrupt(format!("implausible box count {nb}")));
    }
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let center = Point3::new(r.read_f64()?, r.read_f64()?, r.read_f64()?);
        let size = [r.read_f64()?, r.read_f64()?, r.read_f64()?];
        let yaw = r.read_f64()?;
        let cat_id = r.read_u32()?;
        let category = Category::from_id(cat_id)
            .ok_or_else(|| r.corrupt(format!("unknown category id {cat_id}")))?;
        let albedo = r.read_f64()?;
        boxes.push(OrientedBox {
            center,
            size,
            yaw,
            category,
            albedo,
        });
    }

    r.enter("tags");
    let nt = r.read_u32()? as usize;
    if nt != 2 {
        return Err(r.corrupt(format!("expected 2 tags, got {nt}")));
    }
    let b_id = r.read_u32()?;
    let w_id = r.read_u32()?;
    let tags = SceneTags {
        brightness: BrightnessTag::from_id(b_id)
            .ok_or_else(|| r.corrupt(format!("unknown brightness tag {b_id}")))?,
        weather: WeatherTag::from_id(w_id)
            .ok_or_else(|| r.corrupt(format!("unknown weather tag {w_id}")))?,
    };

    Ok(SceneRecord {
        range_image,
        images,
        depth_gt,
        boxes,
        tags,
        rig,
        lidar,
    })
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:06}.xds")
}

/// Writes all records plus the manifest (manifest last).
pub fn write_dataset(records: &[SceneRecord], dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let name = scene_file_name(i);
        write_scene(rec, &dir.join(&name))?;
        names.push(name);
    }
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    for name in &names {
        writeln!(manifest, "{name}")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads every scene listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneRecord>, DataError> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let names: Vec<&str> = manifest.lines().filter(|l| !l.is_empty()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        out.push(read_scene(&dir.join(name))?);
    }
    if out.len() != names.len() {
        return Err(DataError::ManifestMismatch {
            listed: names.len(),
            found: out.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{make_rig, simulate_scene, SimConfig};
    use std::io::Write as _;

    fn sample_record() -> SceneRecord {
        let lidar = LidarSpec::uniform(8, -0.26, 0.09, 32, 40.0);
        let rig = make_rig(4, 16, 8, 100f64.to_radians());
        simulate_scene(7, &SimConfig::default(), &lidar, &rig).unwrap()
    }

    #[test]
    fn scene_round_trip_bit_exact() {
        let rec = sample_record();
        let dir = std::env::temp_dir().join("jg_io_test_rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.xds");
        write_scene(&rec, &path).unwrap();
        let back = read_scene(&path).unwrap();
        assert_eq!(rec, back);
        // Byte-stable rewrite.
        let path2 = dir.join("s2.xds");
        write_scene(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_round_trip_and_manifest() {
        let recs = vec![sample_record(), sample_record()];
        let dir = std::env::temp_dir().join("jg_io_test_ds");
        fs::remove_dir_all(&dir).ok();
        write_dataset(&recs, &dir).unwrap();
        let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 2);
        let back = read_dataset(&dir).unwrap();
        assert_eq!(recs, back);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected_with_position() {
        let dir = std::env::temp_dir().join("jg_io_test_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.xds");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_scene(&path) {
            Err(DataError::Corrupt {
                section, offset, ..
            }) => {
                assert_eq!(section, "magic");
                assert_eq!(offset, 4);
            }
            other => panic!("expected corrupt magic, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_names_missing_section() {
        let rec = sample_record();
        let dir = std::env::temp_dir().join("jg_io_test_trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.xds");
        write_scene(&rec, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        // Cut in the middle of the range image payload.
        let cut = 4 + 4 + (8 + 8 * rec.lidar.num_beams() as u64 + 8) as usize
            + 4
            + rec.rig.len() * (72 + 24 + 72 + 8)
            + 10;
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(&bytes[..cut]).unwrap();
        drop(f);
        match read_scene(&path) {
            Err(DataError::Truncated(section)) => assert_eq!(section, "range image"),
            other => panic!("expected truncation error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }
}
