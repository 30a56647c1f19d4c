use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::SceneDataset;
use crate::error::{Error, Result};
use crate::real::Aabb;
use crate::render::{Camera, Image, View};

fn field<'a>(v: &'a Value, name: &str, path: &Path) -> Result<&'a Value> {
    v.get(name)
        .ok_or_else(|| Error::parse(path, format!("missing field `{name}`")))
}

fn matrix(v: &Value, path: &Path, frame: usize) -> Result<[[f64; 4]; 4]> {
    let bad = || {
        Error::parse(
            path,
            format!("frames[{frame}].transform_matrix must be a 4x4 number array"),
        )
    };
    let rows = v.as_array().filter(|r| r.len() == 4).ok_or_else(bad)?;
    let mut m = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().filter(|r| r.len() == 4).ok_or_else(bad)?;
        for (j, x) in row.iter().enumerate() {
            m[i][j] = x.as_f64().ok_or_else(bad)?;
        }
    }
    Ok(m)
}

/// Loads `transforms_{split}.json` in the NeRF blender convention. Image
/// paths without an extension get `.png`; alpha is composited onto `background`.
pub fn load_nerf_synthetic(
    dir: &Path,
    split: &str,
    background: [f64; 3],
    aabb: Aabb,
) -> Result<SceneDataset> {
    let path = dir.join(format!("transforms_{split}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let angle = field(&doc, "camera_angle_x", &path)?
        .as_f64()
        .ok_or_else(|| Error::parse(&path, "field `camera_angle_x` must be a number"))?;
    let frames = field(&doc, "frames", &path)?
        .as_array()
        .ok_or_else(|| Error::parse(&path, "field `frames` must be an array"))?;
    if frames.is_empty() {
        return Err(Error::NoFrames { path });
    }
    let mut views = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let file = field(frame, "file_path", &path)?.as_str().ok_or_else(|| {
            Error::parse(&path, format!("frames[{i}].file_path must be a string"))
        })?;
        let pose = matrix(field(frame, "transform_matrix", &path)?, &path, i)?;
        let mut img_path = dir.join(file);
        if img_path.extension().is_none() {
            img_path.set_extension("png");
        }
        let image = Image::read_png(&img_path, background)?;
        let focal = 0.5 * image.width() as f64 / (0.5 * angle).tan();
        let camera = Camera::new(image.width(), image.height(), focal, pose)
            .map_err(|e| Error::parse(&path, format!("frames[{i}]: {e}")))?;
        views.push(View { camera, image });
    }
    let (w, h) = (views[0].image.width(), views[0].image.height());
    if views
        .iter()
        .any(|v| v.image.width() != w || v.image.height() != h)
    {
        return Err(Error::DimensionMismatch(format!(
            "{}: images differ in resolution",
            path.display()
        )));
    }
    Ok(SceneDataset {
        views,
        split: split.to_string(),
        aabb,
        background,
    })
}

/// Writes `transforms_{split}.json` and `{split}/r_{i}.png` under `dir`.
pub fn write_nerf_synthetic(dataset: &SceneDataset, dir: &Path) -> Result<PathBuf> {
    let split = &dataset.split;
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let angle = dataset
        .views
        .first()
        .map(|v| 2.0 * (0.5 * v.camera.width as f64 / v.camera.focal).atan())
        .unwrap_or(0.6911112);
    let mut frames = Vec::with_capacity(dataset.views.len());
    for (i, v) in dataset.views.iter().enumerate() {
        let rel = format!("./{split}/r_{i}");
        v.image.write_png(&dir.join(format!("{rel}.png")))?;
        frames.push(json!({ "file_path": rel, "transform_matrix": v.camera.pose }));
    }
    let doc = json!({ "camera_angle_x": angle, "frames": frames });
    let path = dir.join(format!("transforms_{split}.json"));
    let text = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_from_angle() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("train")).unwrap();
        Image::filled(800, 2, [0.5; 3])
            .write_png(&dir.path().join("train/r_0.png"))
            .unwrap();
        let doc = json!({
            "camera_angle_x": 0.6911112,
            "extra": "ignored",
            "frames": [{ "file_path": "./train/r_0", "rotation": 0.1,
                "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]] }]
        });
        fs::write(dir.path().join("transforms_train.json"), doc.to_string()).unwrap();
        let ds = load_nerf_synthetic(dir.path(), "train", [1.0; 3], Aabb::default()).unwrap();
        let expected = 0.5 * 800.0 / (0.5f64 * 0.6911112).tan();
        assert!((ds.views[0].camera.focal - expected).abs() < 1e-9);
        assert!((ds.views[0].camera.focal - 1111.11).abs() < 0.01);
    }

    #[test]
    fn empty_frames_and_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("transforms_val.json");
        fs::write(&p, r#"{"camera_angle_x": 0.5, "frames": []}"#).unwrap();
        let err = load_nerf_synthetic(dir.path(), "val", [1.0; 3], Aabb::default()).unwrap_err();
        assert!(err.to_string().ends_with("no frames"), "{err}");
        fs::write(&p, r#"{"frames": []}"#).unwrap();
        let err = load_nerf_synthetic(dir.path(), "val", [1.0; 3], Aabb::default()).unwrap_err();
        assert!(
            err.to_string().contains("camera_angle_x")
                && err.to_string().contains("transforms_val.json")
        );
        assert!(load_nerf_synthetic(dir.path(), "nope", [1.0; 3], Aabb::default()).is_err());
    }
}
