//! Parsers for the two annotation formats the corpus arrives in: Pascal VOC
//! XML and Labelme JSON (rectangle shapes only).
//!
//! Both parsers share the same repair policy for sloppy geometry, controlled
//! by [`Strictness`]: out-of-bounds boxes are clamped to the image and
//! degenerate boxes are skipped under [`Strictness::Lenient`] (each repair
//! reported as a warning), while [`Strictness::Strict`] escalates them to
//! errors.  Unknown class names and structural damage are always errors.

use roxmltree::{Document, Node};
use serde::Deserialize;

use crate::classes::UlcerClass;
use crate::dataset::{ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use crate::{Strictness, Warned};

/// Applies the shared repair policy to one raw box.  Returns `Ok(None)` when
/// the box was dropped under the lenient policy.
pub(crate) fn sanitize_box(
    (xmin, ymin, xmax, ymax): (f64, f64, f64, f64),
    image_width: f64,
    image_height: f64,
    context: &str,
    strictness: Strictness,
    warnings: &mut Vec<String>,
) -> Result<Option<BBox>> {
    for v in [xmin, ymin, xmax, ymax] {
        if !v.is_finite() {
            return Err(Error::Parse(format!("{context}: coordinate is not finite")));
        }
    }
    if xmin >= xmax || ymin >= ymax {
        let msg = format!(
            "{context}: degenerate box ({xmin}, {ymin}, {xmax}, {ymax})"
        );
        return match strictness {
            Strictness::Strict => Err(Error::Strict(msg)),
            Strictness::Lenient => {
                warnings.push(format!("skipped {msg}"));
                Ok(None)
            }
        };
    }
    if xmin < 0.0 || ymin < 0.0 || xmax > image_width || ymax > image_height {
        let msg = format!(
            "{context}: box ({xmin}, {ymin}, {xmax}, {ymax}) exceeds the \
             {image_width} x {image_height} image"
        );
        if strictness == Strictness::Strict {
            return Err(Error::Strict(msg));
        }
        let cx1 = xmin.max(0.0);
        let cy1 = ymin.max(0.0);
        let cx2 = xmax.min(image_width);
        let cy2 = ymax.min(image_height);
        if cx1 >= cx2 || cy1 >= cy2 {
            warnings.push(format!("skipped {msg} and nothing remains after clamping"));
            return Ok(None);
        }
        warnings.push(format!("clamped {msg}"));
        return Ok(Some(BBox::new(cx1, cy1, cx2, cy2)?));
    }
    Ok(Some(BBox::new(xmin, ymin, xmax, ymax)?))
}

fn child<'a, 'input>(node: Node<'a, 'input>, name: &str) -> Result<Node<'a, 'input>> {
    node.children()
        .find(|n| n.has_tag_name(name))
        .ok_or_else(|| {
            Error::Parse(format!(
                "missing <{name}> element under <{}>",
                node.tag_name().name()
            ))
        })
}

fn child_text<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str> {
    let c = child(node, name)?;
    c.text()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Parse(format!("element <{name}> is empty")))
}

fn parse_number<T: std::str::FromStr>(text: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse()
        .map_err(|e| Error::Parse(format!("bad {what} {text:?}: {e}")))
}

/// Parses a Pascal VOC annotation document.  The image id is the declared
/// `<filename>`.
pub fn parse_voc(
    xml: &str,
    provenance: Provenance,
    strictness: Strictness,
) -> Result<Warned<ImageRecord>> {
    let doc = Document::parse(xml)?;
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(Error::Parse(format!(
            "expected <annotation> document root, found <{}>",
            root.tag_name().name()
        )));
    }
    let filename = child_text(root, "filename")?.to_string();
    let size = child(root, "size")?;
    let width: u32 = parse_number(child_text(size, "width")?, "width")?;
    let height: u32 = parse_number(child_text(size, "height")?, "height")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!(
            "image {filename:?} declares empty extent {width} x {height}"
        )));
    }

    let mut warnings = Vec::new();
    let mut annotations = Vec::new();
    for (i, object) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let class: UlcerClass = child_text(object, "name")?.parse()?;
        let bndbox = child(object, "bndbox")?;
        let xmin: f64 = parse_number(child_text(bndbox, "xmin")?, "xmin")?;
        let ymin: f64 = parse_number(child_text(bndbox, "ymin")?, "ymin")?;
        let xmax: f64 = parse_number(child_text(bndbox, "xmax")?, "xmax")?;
        let ymax: f64 = parse_number(child_text(bndbox, "ymax")?, "ymax")?;
        let context = format!("object {i} of image {filename:?}");
        if let Some(bbox) = sanitize_box(
            (xmin, ymin, xmax, ymax),
            width as f64,
            height as f64,
            &context,
            strictness,
            &mut warnings,
        )? {
            annotations.push(LabeledBox::new(class, bbox));
        }
    }

    Ok(Warned::new(
        ImageRecord {
            image_id: filename.clone(),
            source_path: filename,
            width,
            height,
            provenance,
            annotations,
        },
        warnings,
    ))
}

#[derive(Deserialize)]
struct LabelmeFile {
    #[serde(rename = "imagePath")]
    image_path: String,
    #[serde(rename = "imageWidth")]
    image_width: u32,
    #[serde(rename = "imageHeight")]
    image_height: u32,
    #[serde(default)]
    shapes: Vec<LabelmeShape>,
}

#[derive(Deserialize)]
struct LabelmeShape {
    label: String,
    points: Vec<[f64; 2]>,
    shape_type: String,
}

/// Parses a Labelme JSON document.  Only `rectangle` shapes (two corner
/// points) are supported; any other shape type is an error since polygon
/// annotation is out of scope for this pipeline.
pub fn parse_labelme(
    json: &str,
    provenance: Provenance,
    strictness: Strictness,
) -> Result<Warned<ImageRecord>> {
    let file: LabelmeFile =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("Labelme document: {e}")))?;
    if file.image_path.is_empty() {
        return Err(Error::Parse("Labelme imagePath is empty".into()));
    }
    if file.image_width == 0 || file.image_height == 0 {
        return Err(Error::Parse(format!(
            "image {:?} declares empty extent {} x {}",
            file.image_path, file.image_width, file.image_height
        )));
    }

    let mut warnings = Vec::new();
    let mut annotations = Vec::new();
    for (i, shape) in file.shapes.iter().enumerate() {
        if shape.shape_type != "rectangle" {
            return Err(Error::Parse(format!(
                "shape {i} ({:?}) has type {:?}; only \"rectangle\" shapes are supported",
                shape.label, shape.shape_type
            )));
        }
        if shape.points.len() != 2 {
            return Err(Error::Parse(format!(
                "rectangle shape {i} ({:?}) must have exactly 2 corner points, got {}",
                shape.label,
                shape.points.len()
            )));
        }
        let class: UlcerClass = shape.label.parse()?;
        let (a, b) = (shape.points[0], shape.points[1]);
        let raw = (
            a[0].min(b[0]),
            a[1].min(b[1]),
            a[0].max(b[0]),
            a[1].max(b[1]),
        );
        let context = format!("shape {i} of image {:?}", file.image_path);
        if let Some(bbox) = sanitize_box(
            raw,
            file.image_width as f64,
            file.image_height as f64,
            &context,
            strictness,
            &mut warnings,
        )? {
            annotations.push(LabeledBox::new(class, bbox));
        }
    }

    Ok(Warned::new(
        ImageRecord {
            image_id: file.image_path.clone(),
            source_path: file.image_path,
            width: file.image_width,
            height: file.image_height,
            provenance,
            annotations,
        },
        warnings,
    ))
}
