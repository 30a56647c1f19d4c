//! Single-file binary checkpoints: header, config echo, tensor clouds,
//! decoder, occupancy, optional optimizer state. All numbers little-endian;
//! trainable values are 32-bit floats.

use std::fs;
use std::path::Path;

use crate::cloud::{Model, RenderSettings, ScaleCloud, ScaleLayout};
use crate::config::RunConfig;
use crate::decode::{AppearanceMatrix, ColorMlp, Decoder, DensityActivation, Linear};
use crate::error::{Error, Result};
use crate::factor_grid::{TensorShape, TriVectorTensor};
use crate::learn::AdamState;
use crate::real::{Aabb, Vec3};
use crate::render::OccupancyGrid;

const MAGIC: &[u8; 8] = b"TRIVECKP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or render.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: u64,
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len());
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.arr::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.arr()?) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }
}

fn ck<E: std::fmt::Display>(e: E) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_aabb(w: &mut Writer, a: &Aabb) {
    a.min.iter().chain(&a.max).for_each(|&v| w.f64(v));
}

fn read_aabb(r: &mut Reader) -> Result<Aabb> {
    Ok(Aabb {
        min: [r.f64()?, r.f64()?, r.f64()?],
        max: [r.f64()?, r.f64()?, r.f64()?],
    })
}

fn write_mlp(w: &mut Writer, mlp: &ColorMlp<f32>) {
    w.u32(mlp.feature_dim());
    for l in mlp.layers() {
        w.u32(l.inputs);
        w.u32(l.outputs);
        w.f32s(&l.weight);
        w.f32s(&l.bias);
    }
}

fn read_mlp(r: &mut Reader) -> Result<ColorMlp<f32>> {
    let feature_dim = r.u32()?;
    let mut layer = || -> Result<Linear<f32>> {
        let inputs = r.u32()?;
        let outputs = r.u32()?;
        let weight = r.f32s(inputs * outputs)?;
        let bias = r.f32s(outputs)?;
        Ok(Linear {
            inputs,
            outputs,
            weight,
            bias,
        })
    };
    let layers = [layer()?, layer()?, layer()?];
    ColorMlp::from_layers(feature_dim, layers).map_err(ck)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.bytes(self.config.to_json().as_bytes());
        w.u64(self.step);

        let m = &self.model;
        write_aabb(&mut w, &m.aabb);
        m.background.iter().for_each(|&v| w.f64(v));
        w.f64(m.settings.step_size);
        w.f64(m.settings.early_stop_transmittance);
        w.f64(m.settings.color_weight_threshold);

        w.u32(m.scales.len());
        for cloud in &m.scales {
            let l = cloud.layout();
            l.origin.iter().for_each(|&v| w.f64(v));
            w.f64(l.spacing);
            w.f64(l.edge);
            w.u32(l.neighbors);
            w.u32(cloud.len());
            for (cell, t) in cloud.cells().iter().zip(cloud.tensors()) {
                cell.iter().for_each(|&c| w.i32(c));
                let p = t.position();
                w.f32s(&[p.x, p.y, p.z, t.edge()]);
                let s = t.shape();
                [
                    s.density_rank,
                    s.appearance_rank,
                    s.res[0],
                    s.res[1],
                    s.res[2],
                ]
                .iter()
                .for_each(|&v| w.u32(v));
                w.f32s(t.factors());
            }
        }

        let d = &m.decoder;
        w.f64(d.activation.shift as f64);
        w.u32(d.n_freq);
        for b in &d.appearance {
            w.u32(b.rows());
            w.u32(b.cols());
            w.f32s(b.entries());
        }
        write_mlp(&mut w, &d.mlp);

        match &m.occupancy {
            None => w.u8(0),
            Some(g) => {
                w.u8(1);
                w.u32(g.resolution());
                write_aabb(&mut w, g.aabb());
                w.0.extend(g.voxels().iter().map(|&v| v as u8));
            }
        }

        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for bufs in [&a.tensors_m, &a.tensors_v] {
                    bufs.iter().flatten().for_each(|b| w.f32s(b));
                }
                for bufs in [&a.appearance_m, &a.appearance_v] {
                    bufs.iter().for_each(|b| w.f32s(b));
                }
                for mlp in [&a.mlp_m, &a.mlp_v] {
                    mlp.buffers().for_each(|b| w.f32s(b));
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config_text = std::str::from_utf8(r.bytes()?).map_err(ck)?;
        let config = RunConfig::from_json(config_text).map_err(ck)?;
        let step = r.u64()?;

        let aabb = read_aabb(&mut r)?;
        let background = [r.f64()?, r.f64()?, r.f64()?];
        let settings = RenderSettings {
            step_size: r.f64()?,
            early_stop_transmittance: r.f64()?,
            color_weight_threshold: r.f64()?,
        };

        let n_scales = r.u32()?;
        let mut scales = Vec::with_capacity(n_scales.min(64));
        for _ in 0..n_scales {
            let layout = ScaleLayout {
                origin: [r.f64()?, r.f64()?, r.f64()?],
                spacing: r.f64()?,
                edge: r.f64()?,
                neighbors: r.u32()?,
            };
            let n = r.u32()?;
            let mut cells = Vec::with_capacity(n.min(1 << 20));
            let mut tensors = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                cells.push([r.i32()?, r.i32()?, r.i32()?]);
                let pe = r.f32s(4)?;
                let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let shape =
                    TensorShape::new(dims[0], dims[1], [dims[2], dims[3], dims[4]]).map_err(ck)?;
                let factors = r.f32s(shape.param_count())?;
                tensors.push(
                    TriVectorTensor::from_flat(
                        Vec3::new(pe[0], pe[1], pe[2]),
                        pe[3],
                        shape,
                        factors,
                    )
                    .map_err(ck)?,
                );
            }
            scales.push(ScaleCloud::from_parts(layout, cells, tensors).map_err(ck)?);
        }

        let shift = r.f64()?;
        let n_freq = r.u32()?;
        let mut appearance = Vec::with_capacity(n_scales);
        for _ in 0..n_scales {
            let rows = r.u32()?;
            let cols = r.u32()?;
            appearance.push(AppearanceMatrix::new(rows, cols, r.f32s(rows * cols)?).map_err(ck)?);
        }
        let mlp = read_mlp(&mut r)?;
        let decoder = Decoder {
            appearance,
            mlp,
            activation: DensityActivation {
                shift: shift as f32,
            },
            n_freq,
        };

        let occupancy = if r.flag()? {
            let res = r.u32()?;
            let grid_box = read_aabb(&mut r)?;
            let voxels = r.take(res.pow(3))?.iter().map(|&b| b != 0).collect();
            Some(OccupancyGrid::from_voxels(res, grid_box, voxels).map_err(ck)?)
        } else {
            None
        };
        let model =
            Model::new(scales, decoder, aabb, background, occupancy, settings).map_err(ck)?;

        let adam = if r.flag()? {
            let mut a = AdamState::for_model(&model);
            a.step = r.u64()?;
            for bufs in [&mut a.tensors_m, &mut a.tensors_v] {
                for b in bufs.iter_mut().flatten() {
                    *b = r.f32s(b.len())?;
                }
            }
            for bufs in [&mut a.appearance_m, &mut a.appearance_v] {
                for b in bufs.iter_mut() {
                    *b = r.f32s(b.len())?;
                }
            }
            for mlp in [&mut a.mlp_m, &mut a.mlp_v] {
                for b in mlp.buffers_mut() {
                    *b = r.f32s(b.len())?;
                }
            }
            Some(a)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScaleSpec;

    fn small() -> Checkpoint {
        let mut config = RunConfig::default();
        config.scales = vec![
            ScaleSpec {
                spacing: 0.4,
                edge: 0.6,
                start_res: 5,
                end_res: 9,
                neighbors: 4,
            },
            ScaleSpec {
                spacing: 0.2,
                edge: 0.3,
                start_res: 3,
                end_res: 5,
                neighbors: 2,
            },
        ];
        config.appearance_rank = 3;
        config.density_rank = 2;
        config.hidden = 8;
        let pts = [[0.1, 0.1, 0.1], [-0.5, 0.3, 0.2]];
        let mut occ = OccupancyGrid::empty(4, Aabb::default());
        occ.set([1, 2, 3], true);
        let model = config.build_model::<f32>(&pts, Some(occ)).unwrap();
        let mut adam = AdamState::for_model(&model);
        adam.step = 7;
        adam.mlp_v.layers_mut()[1].bias[0] = 0.25;
        Checkpoint {
            config,
            step: 7,
            model,
            adam: Some(adam),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let no_adam = Checkpoint { adam: None, ..ck };
        assert_eq!(
            Checkpoint::from_bytes(&no_adam.to_bytes()).unwrap(),
            no_adam
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = small().to_bytes();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
