//! Multi-resolution token extraction: one downsampled global patch stream
//! plus full-resolution region streams, admitted under a token budget.

use crate::error::{Error, Result};
use crate::geometry::{BBox, RegionPlan};
use crate::image::{crop, downsample, resize_bilinear, ImageBuffer, CHANNELS};
use crate::tensor::Tensor;

/// Origin of a patch stream within the multi-resolution bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Global,
    Roi,
    Combined,
}

impl StreamKind {
    pub fn index(self) -> usize {
        match self {
            StreamKind::Global => 0,
            StreamKind::Roi => 1,
            StreamKind::Combined => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StreamKind::Global => "global",
            StreamKind::Roi => "roi",
            StreamKind::Combined => "combined",
        }
    }
}

/// One patchified view: a grid of flattened, channel-last patch tokens.
#[derive(Debug, Clone)]
pub struct PatchStream {
    pub stream_kind: StreamKind,
    pub source_box: BBox,
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_px: usize,
    /// `[grid_w * grid_h, patch_px * patch_px * 3]`
    pub tokens: Tensor,
}

impl PatchStream {
    pub fn token_count(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

/// The dynamic-resolution input bundle for one image.
#[derive(Debug, Clone)]
pub struct DynRslInput {
    pub global_stream: PatchStream,
    pub region_streams: Vec<PatchStream>,
    pub total_tokens: usize,
    /// Candidate regions that the token budget forced out.
    pub regions_dropped: usize,
}

impl DynRslInput {
    pub fn streams(&self) -> impl Iterator<Item = &PatchStream> {
        std::iter::once(&self.global_stream).chain(self.region_streams.iter())
    }
}

/// Geometry of the token bundle; defaults follow the reference 224-pixel
/// global view with 16-pixel patches and 96-pixel region views.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchifyConfig {
    pub global_side: usize,
    pub region_side: usize,
    pub patch_px: usize,
    pub token_budget: usize,
}

impl Default for PatchifyConfig {
    fn default() -> Self {
        PatchifyConfig {
            global_side: 224,
            region_side: 96,
            patch_px: 16,
            token_budget: 1024,
        }
    }
}

impl PatchifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 || self.global_side == 0 || self.region_side == 0 {
            return Err(Error::Config {
                what: "patch and stream sides must be positive".into(),
            });
        }
        if !self.global_side.is_multiple_of(self.patch_px) || !self.region_side.is_multiple_of(self.patch_px) {
            return Err(Error::Config {
                what: format!(
                    "global_side {} and region_side {} must be multiples of patch_px {}",
                    self.global_side, self.region_side, self.patch_px
                ),
            });
        }
        Ok(())
    }

    pub fn global_tokens(&self) -> usize {
        let g = self.global_side / self.patch_px;
        g * g
    }

    pub fn region_tokens(&self) -> usize {
        let g = self.region_side / self.patch_px;
        g * g
    }

    /// Flattened token width: `patch_px^2 * 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * CHANNELS
    }
}

/// Cut an image whose sides are exact multiples of `patch_px` into
/// non-overlapping patches in row-major grid order, each flattened
/// channel-last.
pub fn patchify(img: &ImageBuffer, patch_px: usize) -> Result<(Tensor, usize, usize)> {
    if patch_px == 0 {
        return Err(Error::Parameter {
            what: "patch_px must be positive".into(),
        });
    }
    if !img.width.is_multiple_of(patch_px) || !img.height.is_multiple_of(patch_px) {
        return Err(Error::Contract {
            what: format!(
                "image {}x{} is not divisible into {patch_px}-pixel patches; resize first",
                img.width, img.height
            ),
        });
    }
    let grid_w = img.width / patch_px;
    let grid_h = img.height / patch_px;
    let dim = patch_px * patch_px * CHANNELS;
    let mut data = Vec::with_capacity(grid_w * grid_h * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for py in 0..patch_px {
                let y = gy * patch_px + py;
                let start = (y * img.width + gx * patch_px) * CHANNELS;
                data.extend_from_slice(&img.data[start..start + patch_px * CHANNELS]);
            }
        }
    }
    let tokens = Tensor::new(vec![grid_w * grid_h, dim], data)?;
    Ok((tokens, grid_w, grid_h))
}

/// Inverse of [`patchify`]; reassembles the image from its tokens.
pub fn unpatchify(tokens: &Tensor, grid_w: usize, grid_h: usize, patch_px: usize) -> Result<ImageBuffer> {
    let dim = patch_px * patch_px * CHANNELS;
    let (count, got_dim) = tokens.dims2("unpatchify")?;
    if count != grid_w * grid_h || got_dim != dim {
        return Err(Error::Shape {
            op: "unpatchify",
            detail: format!(
                "tokens {:?} do not match a {grid_w}x{grid_h} grid of {patch_px}px patches",
                tokens.shape()
            ),
        });
    }
    let (w, h) = (grid_w * patch_px, grid_h * patch_px);
    let mut data = vec![0.0; w * h * CHANNELS];
    let td = tokens.data();
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let tok = &td[(gy * grid_w + gx) * dim..(gy * grid_w + gx + 1) * dim];
            for py in 0..patch_px {
                let y = gy * patch_px + py;
                let dst = (y * w + gx * patch_px) * CHANNELS;
                let src = py * patch_px * CHANNELS;
                data[dst..dst + patch_px * CHANNELS].copy_from_slice(&tok[src..src + patch_px * CHANNELS]);
            }
        }
    }
    drop(td);
    ImageBuffer::new(w, h, data)
}

fn stream_from_image(
    img: &ImageBuffer,
    kind: StreamKind,
    source_box: BBox,
    patch_px: usize,
) -> Result<PatchStream> {
    let (tokens, grid_w, grid_h) = patchify(img, patch_px)?;
    Ok(PatchStream {
        stream_kind: kind,
        source_box,
        grid_w,
        grid_h,
        patch_px,
        tokens,
    })
}

/// Build the full dynamic-resolution bundle for one image.
///
/// The global stream patchifies the area-downsampled image; every region
/// (ROIs first, then combined regions, each in plan order) is cropped from
/// the original image at full resolution, resized to `region_side`, and
/// patchified. Regions are admitted until the next one would exceed the
/// token budget.
pub fn build_dynrsl_input(
    img: &ImageBuffer,
    plan: &RegionPlan,
    cfg: &PatchifyConfig,
) -> Result<DynRslInput> {
    cfg.validate()?;
    let full_box = BBox::new(0.0, 0.0, img.width as f64, img.height as f64)?;
    let global_img = downsample(img, cfg.global_side, cfg.global_side)?;
    let global_stream = stream_from_image(&global_img, StreamKind::Global, full_box, cfg.patch_px)?;
    let mut total = global_stream.token_count();
    if total > cfg.token_budget {
        return Err(Error::Config {
            what: format!(
                "token_budget {} cannot fit the {}-token global stream",
                cfg.token_budget, total
            ),
        });
    }

    let candidates: Vec<(StreamKind, BBox)> = plan
        .rois
        .iter()
        .map(|b| (StreamKind::Roi, *b))
        .chain(plan.combined.iter().map(|c| (StreamKind::Combined, c.bbox)))
        .collect();

    let mut region_streams = Vec::new();
    let mut regions_dropped = 0usize;
    let per_region = cfg.region_tokens();
    for (kind, bbox) in candidates {
        if total + per_region > cfg.token_budget {
            regions_dropped += 1;
            continue;
        }
        let cropped = crop(img, &bbox)?;
        let resized = resize_bilinear(&cropped, cfg.region_side, cfg.region_side)?;
        region_streams.push(stream_from_image(&resized, kind, bbox, cfg.patch_px)?);
        total += per_region;
    }

    Ok(DynRslInput {
        global_stream,
        region_streams,
        total_tokens: total,
        regions_dropped,
    })
}
