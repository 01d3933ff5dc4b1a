//! Chips on the data server: population, manifests and batch assembly.
//!
//! A chip with base key `<prefix><index:06>` is stored as two tensors,
//! `<base>/img` (`[3,H,W]`) and `<base>/mask` (`[1,H,W]`). The index is the
//! generator index, so repopulating with the same spec is byte-identical.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use shipnet_core::chipgen::{augment, generate_chip, ChipSpec, Flip};
use shipnet_core::Tensor;
use shipnet_dataserver::Client;

use crate::error::{Result, TrainError};

const IMG_SUFFIX: &str = "/img";
const MASK_SUFFIX: &str = "/mask";

pub fn chip_key(prefix: &str, index: u64) -> String {
    format!("{prefix}{index:06}")
}

pub fn img_key(base: &str) -> String {
    format!("{base}{IMG_SUFFIX}")
}

pub fn mask_key(base: &str) -> String {
    format!("{base}{MASK_SUFFIX}")
}

/// Anything that can hand out the stored (image, mask) pair of a chip.
pub trait ChipSource {
    /// `None` when either half of the chip is missing.
    fn chip(&mut self, base: &str) -> Result<Option<(Tensor, Tensor)>>;
}

impl ChipSource for Client {
    fn chip(&mut self, base: &str) -> Result<Option<(Tensor, Tensor)>> {
        let Some((img, _)) = self.get_tensor(&img_key(base))? else {
            return Ok(None);
        };
        let Some((mask, _)) = self.get_tensor(&mask_key(base))? else {
            return Ok(None);
        };
        Ok(Some((img, mask)))
    }
}

/// Chips held in process memory; used where a server round trip would only
/// add noise (unit tests, offline evaluation).
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    chips: HashMap<String, (Tensor, Tensor)>,
}

impl MemorySource {
    pub fn generate(spec: &ChipSpec, indices: Range<u64>, prefix: &str) -> Result<(MemorySource, Vec<String>)> {
        let mut src = MemorySource::default();
        let mut keys = Vec::with_capacity((indices.end - indices.start) as usize);
        for i in indices {
            let chip = generate_chip(spec, i)?;
            let base = chip_key(prefix, i);
            src.chips.insert(base.clone(), (chip.image, chip.mask));
            keys.push(base);
        }
        Ok((src, keys))
    }

    pub fn insert(&mut self, base: String, image: Tensor, mask: Tensor) {
        self.chips.insert(base, (image, mask));
    }
}

impl ChipSource for MemorySource {
    fn chip(&mut self, base: &str) -> Result<Option<(Tensor, Tensor)>> {
        Ok(self.chips.get(base).cloned())
    }
}

/// Generates chips `indices` of `spec` and stores them under `prefix`.
/// Returns the manifest of base keys in index order.
pub fn populate(client: &mut Client, spec: &ChipSpec, indices: Range<u64>, prefix: &str) -> Result<Vec<String>> {
    spec.validate()?;
    let mut manifest = Vec::with_capacity((indices.end.saturating_sub(indices.start)) as usize);
    for i in indices {
        let stored = (|| -> Result<String> {
            let chip = generate_chip(spec, i)?;
            let base = chip_key(prefix, i);
            client.set_tensor(&img_key(&base), &chip.image)?;
            client.set_tensor(&mask_key(&base), &chip.mask)?;
            Ok(base)
        })();
        match stored {
            Ok(base) => manifest.push(base),
            Err(e) => {
                return Err(TrainError::Partial {
                    completed: manifest.len(),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(manifest)
}

/// Base keys of every chip stored under `prefix`, sorted.
pub fn manifest(client: &mut Client, prefix: &str) -> Result<Vec<String>> {
    Ok(client
        .keys(prefix)?
        .into_iter()
        .filter_map(|k| k.strip_suffix(IMG_SUFFIX).map(str::to_string))
        .collect())
}

/// Per-sample flip, reproducible from (seed, epoch, key).
pub fn flip_for(seed: u64, epoch: u64, base: &str) -> Flip {
    Flip::for_sample(seed, epoch, crc32fast::hash(base.as_bytes()) as u64)
}

/// Stacks the chips of `keys` into `[N,3,H,W]` images and `[N,1,H,W]`
/// masks. With `augment = Some((seed, epoch))` each chip gets its flip.
pub fn fetch_batch(
    source: &mut dyn ChipSource,
    keys: &[String],
    augmentation: Option<(u64, u64)>,
) -> Result<(Tensor, Tensor)> {
    if keys.is_empty() {
        return Err(TrainError::State("empty batch".into()));
    }
    let mut images = Vec::with_capacity(keys.len());
    let mut masks = Vec::with_capacity(keys.len());
    let mut missing = Vec::new();
    for base in keys {
        match source.chip(base)? {
            Some((img, mask)) => {
                let (img, mask) = match augmentation {
                    Some((seed, epoch)) => augment(&img, &mask, flip_for(seed, epoch, base))?,
                    None => (img, mask),
                };
                images.push(img);
                masks.push(mask);
            }
            None => missing.push(base.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(TrainError::State(format!("chips missing from the data server: {}", missing.join(", "))));
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Path of a chip exported to disk.
pub fn chip_file(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("{index:06}.chip"))
}

/// Writes chips `indices` as one file each: image encoding then mask
/// encoding, in the tensor binary format.
pub fn export_files(spec: &ChipSpec, indices: Range<u64>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for i in indices {
        let chip = generate_chip(spec, i)?;
        let mut bytes = chip.image.to_bytes();
        chip.mask.encode_into(&mut bytes);
        let path = chip_file(dir, i);
        fs::write(&path, bytes)?;
        out.push(path);
    }
    Ok(out)
}

/// Reads a file written by [`export_files`].
pub fn read_chip_file(path: &Path) -> Result<(Tensor, Tensor)> {
    let bytes = fs::read(path)?;
    decode_chip_file(&bytes)
}

pub fn decode_chip_file(bytes: &[u8]) -> Result<(Tensor, Tensor)> {
    let (img, used) = Tensor::decode_prefix(bytes)?;
    let mask = Tensor::from_bytes(&bytes[used..])?;
    Ok((img, mask))
}
