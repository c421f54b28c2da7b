//! Patch archives: a JSON manifest plus one little-endian `f32` blob per
//! named array, patches stacked along a leading axis.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use plume_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::patch::{Patch, PatchLayout};
use crate::config::ChannelLayout;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::time::Hour;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    /// Shape of one patch's slice.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub center_station_id: String,
    pub center: GeoPoint,
    pub t0: Hour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub layout_fingerprint: String,
    pub layout: PatchLayout,
    pub channels: ChannelLayout,
    pub arrays: Vec<ArrayEntry>,
    pub patches: Vec<PatchMeta>,
}

fn array_entries(layout: &PatchLayout, channels: &ChannelLayout) -> Vec<ArrayEntry> {
    let e = |name: &str, shape: Vec<usize>| ArrayEntry {
        name: name.to_string(),
        file: format!("{name}.f32"),
        shape,
    };
    let (h, l) = (layout.hi_size, layout.lo_size);
    let mut v = vec![
        e("hi_hist", vec![layout.n_in, h, h, channels.hi_hist.len()]),
        e("hi_const", vec![h, h, channels.hi_const.len()]),
        e("lo_hist", vec![layout.n_in, l, l, channels.lo_hist.len()]),
        e("lo_fcst", vec![layout.n_out, l, l, channels.lo_fcst.len()]),
    ];
    for &(r, n) in &layout.output_grids {
        v.push(e(&format!("target_{r}m"), vec![layout.n_out, n, n, 4]));
    }
    v.push(e("station_truth", vec![layout.n_out, 4]));
    v.push(e("benchmark", vec![4]));
    v
}

fn patch_arrays(p: &Patch) -> Vec<&Tensor<f32>> {
    let mut v = vec![&p.hi_hist, &p.hi_const, &p.lo_hist, &p.lo_fcst];
    v.extend(p.targets.iter());
    v.push(&p.station_truth);
    v.push(&p.benchmark);
    v
}

pub struct ArchiveWriter {
    dir: PathBuf,
    manifest: ArchiveManifest,
    files: Vec<BufWriter<File>>,
}

impl ArchiveWriter {
    pub fn create(dir: &Path, layout: &PatchLayout, channels: &ChannelLayout) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arrays = array_entries(layout, channels);
        let files = arrays
            .iter()
            .map(|a| {
                let path = dir.join(&a.file);
                File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: ArchiveManifest {
                format: "plume-patches/1".into(),
                layout_fingerprint: layout.fingerprint(),
                layout: layout.clone(),
                channels: channels.clone(),
                arrays,
                patches: Vec::new(),
            },
            files,
        })
    }

    pub fn push(&mut self, patch: &Patch) -> Result<()> {
        let arrays = patch_arrays(patch);
        if arrays.len() != self.manifest.arrays.len() {
            return Err(Error::InvalidShape(format!(
                "patch has {} arrays, archive expects {}",
                arrays.len(),
                self.manifest.arrays.len()
            )));
        }
        for (t, entry) in arrays.iter().zip(&self.manifest.arrays) {
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::InvalidShape(format!(
                    "{}: expected {:?}, got {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
        }
        for ((t, entry), f) in arrays.iter().zip(&self.manifest.arrays).zip(&mut self.files) {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            f.write_all(&bytes).map_err(|e| Error::io(self.dir.join(&entry.file), e))?;
        }
        self.manifest.patches.push(PatchMeta {
            center_station_id: patch.center_station_id.clone(),
            center: patch.center,
            t0: patch.t0,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.manifest.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.patches.is_empty()
    }

    pub fn finish(mut self) -> Result<ArchiveManifest> {
        for (f, entry) in self.files.iter_mut().zip(&self.manifest.arrays) {
            f.flush().map_err(|e| Error::io(self.dir.join(&entry.file), e))?;
        }
        let path = self.dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))?;
        Ok(self.manifest)
    }
}

/// Read side of an archive. Patches are loaded on demand.
#[derive(Debug)]
pub struct Archive {
    dir: PathBuf,
    pub manifest: ArchiveManifest,
}

impl Archive {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ArchiveManifest = serde_json::from_str(&text)?;
        if manifest.layout.fingerprint() != manifest.layout_fingerprint {
            return Err(Error::Integrity(format!("{}: layout fingerprint does not match layout", path.display())));
        }
        let n = manifest.patches.len() as u64;
        for a in &manifest.arrays {
            let p = dir.join(&a.file);
            let len = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            let want = n * a.shape.iter().product::<usize>() as u64 * 4;
            if len != want {
                return Err(Error::Integrity(format!(
                    "{}: {len} bytes, manifest implies {want}",
                    p.display()
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.patches.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_array(&self, entry: &ArrayEntry, index: usize) -> Result<Tensor<f32>> {
        let n: usize = entry.shape.iter().product();
        let path = self.dir.join(&entry.file);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start((index * n * 4) as u64))
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::from_vec(&entry.shape, data)?)
    }

    pub fn get(&self, index: usize) -> Result<Patch> {
        let meta = self
            .manifest
            .patches
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("patch {index} out of range")))?;
        let mut arrays = self
            .manifest
            .arrays
            .iter()
            .map(|a| self.read_array(a, index))
            .collect::<Result<Vec<_>>>()?;
        let benchmark = arrays.pop().expect("benchmark");
        let station_truth = arrays.pop().expect("station_truth");
        let targets = arrays.split_off(4);
        let mut it = arrays.into_iter();
        Ok(Patch {
            center_station_id: meta.center_station_id.clone(),
            center: meta.center,
            t0: meta.t0,
            hi_hist: it.next().expect("hi_hist"),
            hi_const: it.next().expect("hi_const"),
            lo_hist: it.next().expect("lo_hist"),
            lo_fcst: it.next().expect("lo_fcst"),
            targets,
            station_truth,
            benchmark,
        })
    }
}
