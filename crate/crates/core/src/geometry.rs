//! Axis-aligned boxes, region-of-interest combination planning, and
//! ingestion of externally produced detections.
//!
//! Coordinates use image conventions: x grows rightward, y grows downward,
//! and every box satisfies `x1 <= x2`, `y1 <= y2`.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::Validation {
                line: 0,
                detail: format!("box [{x1}, {y1}, {x2}, {y2}] has non-finite coordinates"),
            });
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Validation {
                line: 0,
                detail: format!("box [{x1}, {y1}, {x2}, {y2}] violates x1 <= x2, y1 <= y2"),
            });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Exact coordinate equality, used for deduplication.
    pub fn coords_equal(&self, other: &BBox) -> bool {
        self.x1 == other.x1 && self.y1 == other.y1 && self.x2 == other.x2 && self.y2 == other.y2
    }

    fn bits(&self) -> [u64; 4] {
        [
            self.x1.to_bits(),
            self.y1.to_bits(),
            self.x2.to_bits(),
            self.y2.to_bits(),
        ]
    }
}

/// One detector output record. The detector itself lives outside this crate;
/// records arrive through [`ingest_detections`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_label: String,
    pub score: f64,
    pub bbox: BBox,
}

/// Flags describing which caps or cleanups fired while building a plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CapsApplied {
    /// Some subsets were skipped because they exceed `max_subset_size`.
    pub size_cap: bool,
    /// At least one duplicate merged box was dropped.
    pub dedup: bool,
    /// The plan was cut down to `max_regions` entries.
    pub truncated: bool,
    /// A kept combined box coincides exactly with one of the ROIs.
    /// Such regions are kept, not dropped.
    pub combined_equals_roi: bool,
    /// Number of subsets the enumeration visited (before deduplication).
    pub subsets_enumerated: usize,
}

/// A combined region and the ROI indices it merges.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedRegion {
    pub members: Vec<usize>,
    pub bbox: BBox,
}

/// The region extraction plan for one image: the ROIs plus the merged
/// combinations selected under the configured caps.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPlan {
    pub rois: Vec<BBox>,
    pub combined: Vec<CombinedRegion>,
    pub caps_applied: CapsApplied,
}

impl RegionPlan {
    pub fn empty() -> RegionPlan {
        RegionPlan {
            rois: Vec::new(),
            combined: Vec::new(),
            caps_applied: CapsApplied::default(),
        }
    }
}

/// Coordinate-wise union of a non-empty set of boxes:
/// `(min x1, min y1, max x2, max y2)`.
pub fn merge_boxes(members: &[BBox]) -> Result<BBox> {
    let first = members.first().ok_or_else(|| Error::Contract {
        what: "merge_boxes on an empty list".into(),
    })?;
    let mut out = *first;
    for b in &members[1..] {
        out.x1 = out.x1.min(b.x1);
        out.y1 = out.y1.min(b.y1);
        out.x2 = out.x2.max(b.x2);
        out.y2 = out.y2.max(b.y2);
    }
    Ok(out)
}

/// Enumerate all ROI subsets of size `2..=max_subset_size` in lexicographic
/// order of member indices, merge each subset, deduplicate identical merged
/// boxes (first occurrence wins), then keep the `max_regions` smallest-area
/// regions, smallest first.
pub fn enumerate_combinations(
    rois: &[BBox],
    max_subset_size: usize,
    max_regions: usize,
) -> Result<RegionPlan> {
    if max_subset_size < 2 {
        return Err(Error::Parameter {
            what: format!("max_subset_size must be >= 2, got {max_subset_size}"),
        });
    }
    let n = rois.len();
    let cap = max_subset_size.min(n);
    let mut caps = CapsApplied {
        size_cap: max_subset_size < n,
        ..CapsApplied::default()
    };

    let mut entries: Vec<CombinedRegion> = Vec::new();
    let mut seen: std::collections::HashSet<[u64; 4]> = std::collections::HashSet::new();
    let mut current: Vec<usize> = Vec::new();

    fn visit(
        rois: &[BBox],
        cap: usize,
        start: usize,
        current: &mut Vec<usize>,
        caps: &mut CapsApplied,
        seen: &mut std::collections::HashSet<[u64; 4]>,
        entries: &mut Vec<CombinedRegion>,
    ) {
        for i in start..rois.len() {
            current.push(i);
            if current.len() >= 2 {
                caps.subsets_enumerated += 1;
                let members: Vec<BBox> = current.iter().map(|&j| rois[j]).collect();
                let merged = merge_boxes(&members).expect("non-empty member set");
                if seen.insert(merged.bits()) {
                    entries.push(CombinedRegion {
                        members: current.clone(),
                        bbox: merged,
                    });
                } else {
                    caps.dedup = true;
                }
            }
            if current.len() < cap {
                visit(rois, cap, i + 1, current, caps, seen, entries);
            }
            current.pop();
        }
    }

    if n >= 2 {
        visit(rois, cap, 0, &mut current, &mut caps, &mut seen, &mut entries);
    }

    // Smallest-area regions first; ties keep enumeration order.
    entries.sort_by(|a, b| a.bbox.area().partial_cmp(&b.bbox.area()).unwrap());
    if entries.len() > max_regions {
        caps.truncated = true;
        entries.truncate(max_regions);
    }
    caps.combined_equals_roi = entries
        .iter()
        .any(|e| rois.iter().any(|r| r.coords_equal(&e.bbox)));

    Ok(RegionPlan {
        rois: rois.to_vec(),
        combined: entries,
        caps_applied: caps,
    })
}

/// Number of subsets of size `2..=max_subset_size` of an `n`-element set.
/// With the size cap disabled this is `2^n - n - 1`.
pub fn combination_count(n: usize, max_subset_size: usize) -> usize {
    let mut total = 0usize;
    for k in 2..=max_subset_size.min(n) {
        let mut c = 1usize;
        for i in 0..k {
            c = c * (n - i) / (i + 1);
        }
        total += c;
    }
    total
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    class: String,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Parse a JSON-lines detection stream into per-image groups.
///
/// One object per line with fields `image_id`, `class`, `score`, and
/// `box = [x1, y1, x2, y2]`; unknown fields are rejected. Groups appear in
/// first-occurrence order of `image_id` and keep file order within a group.
pub fn ingest_detections<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<Detection>)>> {
    let mut groups: Vec<(String, Vec<Detection>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(Error::Validation {
                line: line_no,
                detail: format!(
                    "record for image {:?}: score {} outside [0, 1]",
                    rec.image_id, rec.score
                ),
            });
        }
        let [x1, y1, x2, y2] = rec.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::Validation {
            line: line_no,
            detail: format!("record for image {:?}: {e}", rec.image_id),
        })?;
        let det = Detection {
            image_id: rec.image_id.clone(),
            class_label: rec.class,
            score: rec.score,
            bbox,
        };
        match groups.iter_mut().find(|(id, _)| *id == rec.image_id) {
            Some((_, v)) => v.push(det),
            None => groups.push((rec.image_id, vec![det])),
        }
    }
    Ok(groups)
}

/// Serialize detections back into the JSON-lines schema.
pub fn write_detections<W: std::io::Write>(w: &mut W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let obj = serde_json::json!({
            "image_id": d.image_id,
            "class": d.class_label,
            "score": d.score,
            "box": [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
        });
        writeln!(w, "{obj}")?;
    }
    Ok(())
}

/// Clamp a box into `[0, width] x [0, height]`. A box whose intersection
/// with the image has no area is rejected.
pub fn clamp_to_image(bbox: &BBox, width: usize, height: usize) -> Result<BBox> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter {
            what: format!("image dimensions must be positive, got {width}x{height}"),
        });
    }
    let (w, h) = (width as f64, height as f64);
    let clamped = BBox {
        x1: bbox.x1.clamp(0.0, w),
        y1: bbox.y1.clamp(0.0, h),
        x2: bbox.x2.clamp(0.0, w),
        y2: bbox.y2.clamp(0.0, h),
    };
    if clamped.width() <= 0.0 || clamped.height() <= 0.0 {
        return Err(Error::EmptyRegion {
            detail: format!(
                "box [{}, {}, {}, {}] has no area inside a {width}x{height} image",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2
            ),
        });
    }
    Ok(clamped)
}
