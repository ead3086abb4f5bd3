use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::resize::{apply_resize, stage_resize, ResizePlan, Stage};
use super::{write_atomic, CorpusRecord};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{stable_hash, LatentAdapter};

pub const CACHE_FILE: &str = "latents.fdt";
pub const CACHE_MANIFEST: &str = "cache_manifest.json";
const PROMPTS: &str = "prompts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheOptions {
    pub stage: Stage,
    /// Drives the stage-1 random crops.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub prompt: String,
    /// `[C, H, W]`.
    pub shape: Vec<usize>,
    /// Payload byte range inside the cache container.
    pub offsets: [u64; 2],
    pub plan: ResizePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIssue {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub options: CacheOptions,
    pub adapter: Value,
    /// Hash over options, adapter and every input image's bytes.
    pub inputs_sha256: String,
    pub cache_sha256: String,
    pub entries: Vec<CacheEntry>,
    pub skipped: Vec<CacheIssue>,
    pub errors: Vec<CacheIssue>,
    /// False when an up-to-date cache was found and nothing was written.
    #[serde(skip)]
    pub rewritten: bool,
}

impl CacheManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(CACHE_MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn container_path(dir: &Path) -> PathBuf {
        dir.join(CACHE_FILE)
    }
}

fn resolve(base: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resizes every record for `options.stage`, encodes it with `adapter` and
/// writes one latent per record into `out_dir/latents.fdt`, keyed by id.
///
/// When `out_dir` already holds a cache built from byte-identical inputs
/// and options, nothing is rewritten.
pub fn build_latent_cache(
    records: &[CorpusRecord],
    base_dir: &Path,
    adapter: &dyn LatentAdapter,
    out_dir: &Path,
    options: &CacheOptions,
) -> Result<CacheManifest> {
    let adapter_desc = serde_json::json!({
        "channels": adapter.channels(),
        "downsample": adapter.downsample(),
    });
    let mut images: Vec<std::result::Result<Vec<u8>, String>> = Vec::with_capacity(records.len());
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(options)?);
    hasher.update(serde_json::to_vec(&adapter_desc)?);
    for r in records {
        let path = resolve(base_dir, &r.image);
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
        hasher.update(serde_json::to_vec(&(&r.id, r.prompt()))?);
        match &bytes {
            Ok(b) => hasher.update(Sha256::digest(b)),
            Err(_) => hasher.update(b"<missing>"),
        }
        images.push(bytes);
    }
    let inputs_sha256 = hex::encode(hasher.finalize());

    let cache_path = CacheManifest::container_path(out_dir);
    if let Ok(existing) = CacheManifest::load(out_dir) {
        if existing.inputs_sha256 == inputs_sha256 {
            if let Ok(bytes) = fs::read(&cache_path) {
                if sha256_hex(&bytes) == existing.cache_sha256 {
                    log::info!("latent cache in {} is up to date", out_dir.display());
                    return Ok(CacheManifest { rewritten: false, ..existing });
                }
            }
        }
    }

    let mut container = Container::new();
    let mut prompts = BTreeMap::new();
    let mut pending = Vec::new();
    let (mut skipped, mut errors) = (Vec::new(), Vec::new());
    for (r, bytes) in records.iter().zip(images) {
        let issue = |reason: String| CacheIssue { id: r.id.clone(), reason };
        let bytes = match bytes {
            Ok(b) => b,
            Err(e) => {
                errors.push(issue(e));
                continue;
            }
        };
        let img = match image::load_from_memory(&bytes) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                errors.push(issue(format!("undecodable image: {e}")));
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(stable_hash(r.id.as_bytes()));
        let plan = stage_resize(img.width(), img.height(), options.stage, &mut rng)?;
        let Some(resized) = apply_resize(&img, &plan) else {
            if let ResizePlan::Skip { aspect } = plan {
                skipped.push(issue(format!("aspect ratio {aspect:.3} is 1:3 or wider")));
            }
            continue;
        };
        match adapter.encode(&resized) {
            Ok(latent) => {
                container.insert(r.id.clone(), &latent);
                prompts.insert(r.id.clone(), r.prompt());
                pending.push((r.id.clone(), r.prompt(), latent.shape().to_vec(), plan));
            }
            Err(e) => errors.push(issue(e.to_string())),
        }
    }
    container.meta.insert(PROMPTS.into(), serde_json::to_value(&prompts)?);
    let offsets = container.payload_offsets();
    let entries = pending
        .into_iter()
        .map(|(id, prompt, shape, plan)| CacheEntry { offsets: offsets[&id], id, prompt, shape, plan })
        .collect();
    let bytes = container.to_bytes()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    write_atomic(&cache_path, &bytes)?;
    let manifest = CacheManifest {
        options: *options,
        adapter: adapter_desc,
        inputs_sha256,
        cache_sha256: sha256_hex(&bytes),
        entries,
        skipped,
        errors,
        rewritten: true,
    };
    write_atomic(&out_dir.join(CACHE_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IdentityAdapter;
    use image::{Rgb, RgbImage};

    fn record(id: &str, image: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            image: image.into(),
            caption: format!("picture {id}"),
            quality_score: None,
            quality_tag: None,
        }
    }

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) % 256) as u8]))
            .save(dir.join(name))
            .unwrap();
    }

    #[test]
    fn empty_record_list_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_latent_cache(
            &[],
            dir.path(),
            &IdentityAdapter::new(4, 8),
            &dir.path().join("cache"),
            &CacheOptions { stage: Stage::One, seed: 0 },
        )
        .unwrap();
        assert!(m.entries.is_empty() && m.errors.is_empty() && m.skipped.is_empty());
    }

    #[test]
    fn round_trip_skip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 640, 480);
        write_png(dir.path(), "b.png", 100, 400);
        let recs = vec![record("a", "a.png"), record("b", "b.png"), record("c", "missing.png")];
        let adapter = IdentityAdapter::new(4, 8);
        let out = dir.path().join("cache");
        let opts = CacheOptions { stage: Stage::Two, seed: 1 };
        let m = build_latent_cache(&recs, dir.path(), &adapter, &out, &opts).unwrap();
        assert!(m.rewritten);
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].shape, vec![4, 48, 72]);
        assert_eq!(m.skipped.len(), 1);
        assert_eq!(m.skipped[0].id, "b");
        assert_eq!(m.errors.len(), 1);
        assert_eq!(m.errors[0].id, "c");

        // read-back equals a fresh encode
        let img = image::open(dir.path().join("a.png")).unwrap().to_rgb8();
        let direct = adapter.encode(&apply_resize(&img, &m.entries[0].plan).unwrap()).unwrap();
        let cached = Container::load(out.join(CACHE_FILE)).unwrap().get::<f32>("a").unwrap();
        assert_eq!(cached.to_vec(), direct.to_vec());

        let before = fs::metadata(out.join(CACHE_FILE)).unwrap().modified().unwrap();
        let again = build_latent_cache(&recs, dir.path(), &adapter, &out, &opts).unwrap();
        assert!(!again.rewritten);
        assert_eq!(again.entries, m.entries);
        assert_eq!(fs::metadata(out.join(CACHE_FILE)).unwrap().modified().unwrap(), before);

        write_png(dir.path(), "a.png", 641, 480);
        assert!(build_latent_cache(&recs, dir.path(), &adapter, &out, &opts).unwrap().rewritten);
    }
}
