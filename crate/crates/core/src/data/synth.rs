//! Deterministic synthetic text-image generator.
//!
//! Renders words from a word list onto randomized backgrounds with system
//! TTF fonts. The same spec and seed always produce a byte-identical
//! corpus, which keeps desk-scale training and its checks reproducible.

use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, ScaleFont};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Image32, IMG_H, IMG_W};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub words: Vec<String>,
    pub fonts: Vec<PathBuf>,
    pub count: usize,
    pub seed: u64,
    /// Additive Gaussian pixel-noise sigma.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Background blur sigma; 0 disables.
    #[serde(default)]
    pub blur: f32,
}

fn default_noise() -> f32 {
    0.02
}

/// Common lowercase words used when no word list is supplied.
const DEFAULT_WORDS: &str = "the and for are but not you all can her was one our out day get \
has him his how man new now old see two way who boy did its let put say she too use that with \
have this will your from they know want been good much some time very when come here just like \
long make many more only over such take than them well were what analysis coffee street market \
system number people water machine window garden summer winter spring yellow orange purple \
silver bridge castle dragon forest island mountain ocean planet river shadow spirit thunder \
village wizard kitchen library monster picture science teacher weather balance camera diamond \
element factory gravity harmony journey kingdom liberty mystery network octopus penguin quality \
rainbow sausage texture uniform victory walnut xylophone yogurt zebra 42 365 2024 007 101";

impl SynthSpec {
    /// Desk-scale default: built-in word list and whatever DejaVu fonts the
    /// system provides.
    pub fn with_defaults(count: usize, seed: u64) -> Self {
        Self {
            words: DEFAULT_WORDS.split_whitespace().map(str::to_string).collect(),
            fonts: discover_system_fonts(),
            count,
            seed,
            noise: default_noise(),
            blur: 0.0,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SynthSpec = toml::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if spec.fonts.is_empty() {
            spec.fonts = discover_system_fonts();
        }
        Ok(spec)
    }
}

pub fn discover_system_fonts() -> Vec<PathBuf> {
    ["DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf", "DejaVuSansMono.ttf"]
        .iter()
        .map(|f| PathBuf::from("/usr/share/fonts/truetype/dejavu").join(f))
        .filter(|p| p.exists())
        .collect()
}

/// Renders the whole corpus in memory as (image, label) pairs.
pub fn render_corpus(spec: &SynthSpec) -> Result<Vec<(Image32, String)>> {
    if spec.words.is_empty() {
        return Err(Error::Config {
            key: "words".into(),
            reason: "word list is empty".into(),
        });
    }
    let fonts = load_fonts(&spec.fonts)?;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = sample_rng(spec.seed, i as u64);
        let word = spec.words[rng.gen_range(0..spec.words.len())].clone();
        let font = &fonts[rng.gen_range(0..fonts.len())];
        let img = render_word(&word, font, spec, &mut rng);
        out.push((img, word));
    }
    Ok(out)
}

/// Renders the corpus under `out_dir`: PNGs plus a `gt.txt` manifest in
/// `relative_path<TAB>label` form.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<()> {
    let samples = render_corpus(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::new();
    for (i, (img, word)) in samples.iter().enumerate() {
        let name = format!("{i:06}.png");
        img.save_png(&out_dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{word}\n"));
    }
    let manifest_path = out_dir.join("gt.txt");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Renders one word; exposed so tests and probes can draw samples without
/// touching disk.
pub fn render_sample(word: &str, spec: &SynthSpec, sample_seed: u64) -> Result<Image32> {
    let fonts = load_fonts(&spec.fonts)?;
    let mut rng = sample_rng(spec.seed, sample_seed);
    let font = &fonts[rng.gen_range(0..fonts.len())];
    Ok(render_word(word, font, spec, &mut rng))
}

fn sample_rng(seed: u64, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0x2545_F491_4F6C_DD1D)),
    )
}

fn load_fonts(paths: &[PathBuf]) -> Result<Vec<FontVec>> {
    if paths.is_empty() {
        return Err(Error::NoFonts("no font paths configured".into()));
    }
    let mut fonts = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        fonts.push(FontVec::try_from_vec(bytes).map_err(|e| Error::NoFonts(format!("{}: {e}", p.display())))?);
    }
    Ok(fonts)
}

fn render_word(word: &str, font: &FontVec, spec: &SynthSpec, rng: &mut ChaCha20Rng) -> Image32 {
    // Background: either light or dark, with mildly varied channels.
    let dark_bg = rng.gen_bool(0.5);
    let base = if dark_bg { rng.gen_range(0.02..0.25) } else { rng.gen_range(0.7..0.98) };
    let bg: [f32; 3] = core::array::from_fn(|_| (base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0));
    let fg_base = if dark_bg { rng.gen_range(0.75..1.0) } else { rng.gen_range(0.0..0.3) };
    let fg: [f32; 3] = core::array::from_fn(|_| (fg_base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0));

    let mut img = Image32::zeros();
    for c in 0..3 {
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                img.set(c, y, x, bg[c]);
            }
        }
    }

    // Pick a size, then shrink until the word fits the canvas width.
    let mut px = rng.gen_range(20.0..30.0f32);
    let margin = 4.0;
    loop {
        let scaled = font.as_scaled(px);
        let width: f32 = word
            .chars()
            .map(|c| scaled.h_advance(scaled.glyph_id(c)))
            .sum();
        if width <= IMG_W as f32 - 2.0 * margin || px <= 6.0 {
            break;
        }
        px *= 0.92;
    }
    let scaled = font.as_scaled(px);
    let text_w: f32 = word
        .chars()
        .map(|c| scaled.h_advance(scaled.glyph_id(c)))
        .sum();
    let max_x0 = (IMG_W as f32 - text_w - margin).max(margin);
    let x0 = rng.gen_range(margin..=max_x0.max(margin + 0.001));
    let baseline = (IMG_H as f32 + scaled.ascent() + scaled.descent()) / 2.0 + rng.gen_range(-1.5..1.5);

    let mut pen_x = x0;
    for ch in word.chars() {
        let gid = scaled.glyph_id(ch);
        let glyph = gid.with_scale_and_position(px, ab_glyph::point(pen_x, baseline));
        if let Some(outline) = font.outline_glyph(glyph) {
            let bounds = outline.px_bounds();
            outline.draw(|gx, gy, cov| {
                let x = bounds.min.x as i32 + gx as i32;
                let y = bounds.min.y as i32 + gy as i32;
                if x >= 0 && x < IMG_W as i32 && y >= 0 && y < IMG_H as i32 {
                    for c in 0..3 {
                        let old = img.get(c, y as usize, x as usize);
                        img.set(c, y as usize, x as usize, old * (1.0 - cov) + fg[c] * cov);
                    }
                }
            });
        }
        pen_x += scaled.h_advance(gid);
    }

    if spec.blur > 0.0 {
        img = super::augment::gaussian_blur(&img, spec.blur);
    }
    if spec.noise > 0.0 {
        for v in img.data.iter_mut() {
            *v = (*v + spec.noise * sample_standard_normal(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

fn sample_standard_normal(rng: &mut ChaCha20Rng) -> f32 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f32 = StandardNormal.sample(rng);
    v
}
