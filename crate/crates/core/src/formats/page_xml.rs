use std::collections::BTreeMap;
use std::fmt::Write as _;

use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use crate::geometry::{polygon_from_baseline, Baseline, PageLayout, Point, Region, TextLineGeom};

use super::{is_xml_name, FormatError, TranscribedPage};

pub const PAGE_NAMESPACE: &str = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15";

/// A parsed document plus notes about content that was ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPage {
    pub page: TranscribedPage,
    pub warnings: Vec<String>,
}

fn round_point(p: &Point) -> Point {
    Point::new(p.x.round() + 0.0, p.y.round() + 0.0)
}

/// The layout as it survives a PAGE round trip: every point rounded to whole
/// pixels, baseline points that no longer advance in x dropped, and lines
/// left with fewer than two baseline points removed.
pub fn quantize_layout(layout: &PageLayout) -> PageLayout {
    let mut out = layout.clone();
    for region in &mut out.regions {
        region.polygon = region.polygon.iter().map(round_point).collect();
        let lines = std::mem::take(&mut region.lines);
        for mut line in lines {
            let mut pts: Vec<Point> = line.baseline.points().iter().map(round_point).collect();
            pts.dedup_by(|b, a| b.x <= a.x);
            let Ok(baseline) = Baseline::new(pts) else { continue };
            line.baseline = baseline;
            line.polygon = line.polygon.iter().map(round_point).collect();
            region.lines.push(line);
        }
    }
    out
}

fn points_attr(points: &[Point]) -> String {
    points.iter().map(|p| format!("{},{}", p.x.round() as i64, p.y.round() as i64)).collect::<Vec<_>>().join(" ")
}

fn heights_attr(line: &TextLineGeom) -> String {
    format!("heights {{ascender:{}; descender:{};}}", line.ascender_height, line.descender_height)
}

/// Serializes a page to the PAGE 2019-07-15 element subset: `Page`,
/// `TextRegion`, `TextLine`, `Coords`, `Baseline` and `TextEquiv/Unicode`.
/// Coordinates are rounded to whole pixels; line heights are kept in the
/// line's `custom` attribute.
pub fn emit_page_xml(page: &TranscribedPage) -> Result<String, FormatError> {
    page.validate()?;
    let layout = quantize_layout(&page.layout);
    let ids = std::iter::once(&layout.page_id)
        .chain(layout.regions.iter().map(|r| &r.id))
        .chain(layout.lines().map(|l| &l.id));
    for id in ids {
        if !is_xml_name(id) {
            return Err(FormatError::InvalidId(id.clone()));
        }
    }
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(out, "<PcGts xmlns=\"{PAGE_NAMESPACE}\" pcGtsId=\"{}\">", layout.page_id);
    let _ = writeln!(
        out,
        "  <Page imageFilename=\"{}\" imageWidth=\"{}\" imageHeight=\"{}\">",
        escape(page.image_filename.as_str()),
        layout.width,
        layout.height
    );
    for region in &layout.regions {
        let _ = writeln!(out, "    <TextRegion id=\"{}\">", region.id);
        let _ = writeln!(out, "      <Coords points=\"{}\"/>", points_attr(&region.polygon));
        for line in &region.lines {
            let _ = writeln!(out, "      <TextLine id=\"{}\" custom=\"{}\">", line.id, heights_attr(line));
            let _ = writeln!(out, "        <Coords points=\"{}\"/>", points_attr(&line.polygon));
            let _ = writeln!(out, "        <Baseline points=\"{}\"/>", points_attr(line.baseline.points()));
            if let Some(text) = page.texts.get(&line.id) {
                match page.confidences.get(&line.id) {
                    Some(c) => {
                        let _ = writeln!(out, "        <TextEquiv conf=\"{c}\">");
                    }
                    None => out.push_str("        <TextEquiv>\n"),
                }
                let _ = writeln!(out, "          <Unicode>{}</Unicode>", escape(text.as_str()));
                out.push_str("        </TextEquiv>\n");
            }
            out.push_str("      </TextLine>\n");
        }
        out.push_str("    </TextRegion>\n");
    }
    out.push_str("  </Page>\n</PcGts>\n");
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ctx {
    Root,
    PcGts,
    Page,
    Region,
    Line,
    TextEquiv,
    Unicode,
    Leaf,
    Unknown,
}

#[derive(Default)]
struct LineDraft {
    id: String,
    heights: Option<(f64, f64)>,
    polygon: Option<Vec<Point>>,
    baseline: Option<Vec<Point>>,
    text: Option<String>,
    conf: Option<f64>,
}

struct RegionDraft {
    id: String,
    polygon: Vec<Point>,
    lines: Vec<TextLineGeom>,
}

struct Parser<'a> {
    reader: Reader<&'a [u8]>,
    warnings: Vec<String>,
    page: Option<TranscribedPage>,
    pc_gts_id: Option<String>,
    region: Option<RegionDraft>,
    line: Option<LineDraft>,
    texts: BTreeMap<String, String>,
    confidences: BTreeMap<String, f64>,
}

fn parse_points(value: &str, position: u64) -> Result<Vec<Point>, FormatError> {
    let bad = || FormatError::Coords { position, value: value.to_string() };
    value
        .split_whitespace()
        .map(|pair| {
            let (x, y) = pair.split_once(',').ok_or_else(bad)?;
            let x: f64 = x.parse().map_err(|_| bad())?;
            let y: f64 = y.parse().map_err(|_| bad())?;
            if x.is_finite() && y.is_finite() {
                Ok(Point::new(x, y))
            } else {
                Err(bad())
            }
        })
        .collect()
}

/// Reads `heights {ascender:A; descender:D;}` out of a `custom` attribute.
fn parse_heights(custom: &str) -> Option<(f64, f64)> {
    let body = custom.split_once("heights")?.1.trim_start().strip_prefix('{')?;
    let body = body.split_once('}')?.0;
    let mut asc = None;
    let mut desc = None;
    for item in body.split(';') {
        if let Some((k, v)) = item.split_once(':') {
            match k.trim() {
                "ascender" => asc = v.trim().parse::<f64>().ok(),
                "descender" => desc = v.trim().parse::<f64>().ok(),
                _ => {}
            }
        }
    }
    Some((asc?, desc?))
}

impl<'a> Parser<'a> {
    fn position(&self) -> u64 {
        self.reader.buffer_position()
    }

    fn attrs(&mut self, e: &BytesStart, element: &str, known: &[&str]) -> Result<BTreeMap<String, String>, FormatError> {
        let mut out = BTreeMap::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| FormatError::Xml { position: self.position(), message: err.to_string() })?;
            let key = attr.key.into_inner().to_string();
            let value = attr
                .normalized_value(XmlVersion::Implicit1_0)
                .map_err(|err| FormatError::Xml { position: self.position(), message: err.to_string() })?
                .into_owned();
            if known.contains(&key.as_str()) {
                out.insert(key, value);
            } else if !(key == "xmlns" || key.starts_with("xmlns:") || key.starts_with("xsi:")) {
                self.warnings.push(format!("ignored attribute {key} on {element}"));
            }
        }
        Ok(out)
    }

    fn number<T: std::str::FromStr>(&self, attrs: &BTreeMap<String, String>, element: &str, name: &str) -> Result<T, FormatError> {
        let value = attrs.get(name).cloned().unwrap_or_default();
        value.parse().map_err(|_| FormatError::Attribute { position: self.position(), element: element.into(), name: name.into(), value })
    }

    /// Handles an opening or empty element and returns the context to push.
    fn open(&mut self, parent: Ctx, e: &BytesStart) -> Result<Ctx, FormatError> {
        let name = e.local_name().into_inner().to_string();
        let pos = self.position();
        let ctx = match (parent, name.as_str()) {
            (Ctx::Root, "PcGts") => {
                let a = self.attrs(e, &name, &["pcGtsId"])?;
                self.pc_gts_id = a.get("pcGtsId").cloned();
                Ctx::PcGts
            }
            (Ctx::PcGts, "Page") => {
                let a = self.attrs(e, &name, &["imageFilename", "imageWidth", "imageHeight"])?;
                let width = self.number(&a, &name, "imageWidth")?;
                let height = self.number(&a, &name, "imageHeight")?;
                let filename = a.get("imageFilename").cloned().unwrap_or_default();
                let id = self.pc_gts_id.clone().unwrap_or_else(|| super::page_id_from_path(std::path::Path::new(&filename)));
                self.page = Some(TranscribedPage::new(PageLayout::empty(id, width, height), filename));
                Ctx::Page
            }
            (Ctx::Page, "TextRegion") => {
                let a = self.attrs(e, &name, &["id"])?;
                self.region = Some(RegionDraft { id: a.get("id").cloned().unwrap_or_default(), polygon: Vec::new(), lines: Vec::new() });
                Ctx::Region
            }
            (Ctx::Region, "Coords") => {
                let a = self.attrs(e, &name, &["points"])?;
                let pts = parse_points(a.get("points").map(String::as_str).unwrap_or(""), pos)?;
                if let Some(r) = self.region.as_mut() {
                    r.polygon = pts;
                }
                Ctx::Leaf
            }
            (Ctx::Region, "TextLine") => {
                let a = self.attrs(e, &name, &["id", "custom"])?;
                let heights = a.get("custom").and_then(|c| parse_heights(c));
                self.line = Some(LineDraft { id: a.get("id").cloned().unwrap_or_default(), heights, ..LineDraft::default() });
                Ctx::Line
            }
            (Ctx::Line, "Coords") | (Ctx::Line, "Baseline") => {
                let a = self.attrs(e, &name, &["points"])?;
                let pts = parse_points(a.get("points").map(String::as_str).unwrap_or(""), pos)?;
                if let Some(l) = self.line.as_mut() {
                    if name == "Coords" {
                        l.polygon = Some(pts);
                    } else {
                        l.baseline = Some(pts);
                    }
                }
                Ctx::Leaf
            }
            (Ctx::Line, "TextEquiv") => {
                let a = self.attrs(e, &name, &["conf"])?;
                let conf = match a.get("conf") {
                    Some(_) => Some(self.number::<f64>(&a, &name, "conf")?),
                    None => None,
                };
                if let Some(l) = self.line.as_mut() {
                    l.conf = conf;
                }
                Ctx::TextEquiv
            }
            (Ctx::TextEquiv, "Unicode") => {
                if let Some(l) = self.line.as_mut() {
                    l.text = Some(String::new());
                }
                Ctx::Unicode
            }
            _ => {
                self.warnings.push(format!("ignored element {name}"));
                Ctx::Unknown
            }
        };
        Ok(ctx)
    }

    fn close(&mut self, ctx: Ctx) {
        match ctx {
            Ctx::Line => {
                let Some(draft) = self.line.take() else { return };
                self.finish_line(draft);
            }
            Ctx::Region => {
                let Some(r) = self.region.take() else { return };
                if let Some(page) = self.page.as_mut() {
                    page.layout.regions.push(Region { id: r.id, polygon: r.polygon, lines: r.lines });
                }
            }
            _ => {}
        }
    }

    fn finish_line(&mut self, draft: LineDraft) {
        let Some(points) = draft.baseline else {
            self.warnings.push(format!("line {} has no Baseline and was skipped", draft.id));
            return;
        };
        let baseline = match Baseline::new(points) {
            Ok(b) => b,
            Err(e) => {
                self.warnings.push(format!("line {} skipped: {e}", draft.id));
                return;
            }
        };
        let mean_y = baseline.mean_y();
        let (asc, desc) = match (draft.heights, &draft.polygon) {
            (Some(h), _) => h,
            (None, Some(poly)) if !poly.is_empty() => {
                let top = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
                let bottom = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
                ((mean_y - top).max(1.0), (bottom - mean_y).max(0.0))
            }
            _ => {
                self.warnings.push(format!("line {} has neither Coords nor heights and was skipped", draft.id));
                return;
            }
        };
        let polygon = match draft.polygon {
            Some(p) => p,
            None => match polygon_from_baseline(&baseline, asc, desc) {
                Ok(p) => p,
                Err(e) => {
                    self.warnings.push(format!("line {} skipped: {e}", draft.id));
                    return;
                }
            },
        };
        if let Some(text) = draft.text {
            self.texts.insert(draft.id.clone(), text);
        }
        if let Some(c) = draft.conf {
            self.confidences.insert(draft.id.clone(), c);
        }
        let line = TextLineGeom { id: draft.id, baseline, ascender_height: asc, descender_height: desc, polygon };
        if let Some(r) = self.region.as_mut() {
            r.lines.push(line);
        }
    }

    fn text(&mut self, ctx: Ctx, s: &str) {
        if ctx == Ctx::Unicode {
            if let Some(t) = self.line.as_mut().and_then(|l| l.text.as_mut()) {
                t.push_str(s);
            }
        } else if !s.trim().is_empty() {
            self.warnings.push(format!("ignored text \"{}\"", s.trim()));
        }
    }
}

/// Parses the PAGE subset written by [`emit_page_xml`]. Unknown elements and
/// attributes are skipped and reported in `warnings`; lines without a
/// `Baseline` are dropped with a warning.
pub fn parse_page_xml(doc: &str) -> Result<ParsedPage, FormatError> {
    let mut p = Parser {
        reader: Reader::from_str(doc),
        warnings: Vec::new(),
        page: None,
        pc_gts_id: None,
        region: None,
        line: None,
        texts: BTreeMap::new(),
        confidences: BTreeMap::new(),
    };
    let mut stack = vec![Ctx::Root];
    loop {
        let event = p.reader.read_event().map_err(|e| FormatError::Xml { position: p.reader.error_position(), message: e.to_string() })?;
        let top = *stack.last().expect("root context");
        match event {
            Event::Start(e) => match p.open(top, &e)? {
                Ctx::Unknown => {
                    p.reader.read_to_end(e.name()).map_err(|err| FormatError::Xml { position: p.reader.error_position(), message: err.to_string() })?;
                }
                ctx => stack.push(ctx),
            },
            Event::Empty(e) => {
                let ctx = p.open(top, &e)?;
                p.close(ctx);
            }
            Event::End(_) => {
                let ctx = stack.pop().expect("balanced document");
                if stack.is_empty() {
                    return Err(FormatError::Xml { position: p.position(), message: "unbalanced end tag".into() });
                }
                p.close(ctx);
            }
            Event::Text(t) => p.text(top, &t.xml10_content()),
            Event::CData(t) => p.text(top, &t.xml10_content()),
            Event::GeneralRef(r) => {
                let name = r.xml10_content();
                let resolved = if r.is_char_ref() {
                    r.resolve_char_ref().ok().flatten().map(String::from)
                } else {
                    resolve_predefined_entity(&name).map(String::from)
                };
                match resolved {
                    Some(s) => p.text(top, &s),
                    None => return Err(FormatError::Xml { position: p.position(), message: format!("unknown entity &{name};") }),
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    let mut page = p.page.ok_or(FormatError::MissingPage)?;
    page.texts = p.texts;
    page.confidences = p.confidences;
    Ok(ParsedPage { page, warnings: p.warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_parse_exactly() {
        assert_eq!(parse_points("10,20 30,40 50,60", 0).unwrap(), vec![Point::new(10.0, 20.0), Point::new(30.0, 40.0), Point::new(50.0, 60.0)]);
        assert!(matches!(parse_points("10,20 30", 7), Err(FormatError::Coords { position: 7, .. })));
    }

    #[test]
    fn heights_round_trip_through_custom() {
        let line = TextLineGeom::from_baseline("l", Baseline::new(vec![Point::new(0.0, 5.0), Point::new(9.0, 5.0)]).unwrap(), 12.25, 0.0).unwrap();
        assert_eq!(parse_heights(&heights_attr(&line)), Some((12.25, 0.0)));
        assert_eq!(parse_heights("readingOrder {index:0;} heights {descender:2; ascender:7.5;}"), Some((7.5, 2.0)));
        assert_eq!(parse_heights("readingOrder {index:0;}"), None);
    }
}
