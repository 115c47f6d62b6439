//! Reading command inputs: images, template CSVs and `key=value` flags.

use std::fs;
use std::path::Path;

use faro_core::media::read_pnm;
use faro_core::worker::DEMO_MODALITY;
use faro_core::{Detection, Frame, Payload, Template};
use faro_net::Client;

use crate::{Failure, TemplateSource};

pub fn key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase()
}

pub fn is_image(path: &Path) -> bool {
    matches!(extension(path).as_str(), "pgm" | "ppm" | "pnm")
}

pub fn is_csv(path: &Path) -> bool {
    extension(path) == "csv"
}

pub fn read_image(path: &Path) -> Result<Frame, Failure> {
    read_pnm(path).map_err(|e| Failure::local(e.to_string()))
}

/// One template per non-empty line of comma-separated reals. Lines
/// starting with `#` are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<Template>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vector = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        let t = Template::new(vector, DEMO_MODALITY);
        t.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err("no template lines".into());
    }
    Ok(out)
}

pub fn format_template(t: &Template) -> String {
    t.vector.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn read_templates(path: &Path) -> Result<Vec<Template>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::local(format!("{}: {e}", path.display())))?;
    parse_templates(&text).map_err(|e| Failure::local(format!("{}: {e}", path.display())))
}

/// The payload `faro call` sends for a file.
pub fn read_payload(path: &Path, content_type: &str) -> Result<Payload, Failure> {
    if is_image(path) {
        Ok(Payload::Frame(read_image(path)?))
    } else if is_csv(path) {
        Ok(Payload::TemplateList(read_templates(path)?))
    } else {
        let data = fs::read(path).map_err(|e| Failure::local(format!("{}: {e}", path.display())))?;
        Ok(Payload::generic(content_type, data))
    }
}

fn area(d: &Detection) -> u64 {
    d.bbox.w as u64 * d.bbox.h as u64
}

/// The template a command works with: the first CSV line, or the
/// largest face found in an image.
pub fn template_from(client: &Client, src: &TemplateSource) -> Result<Template, Failure> {
    if is_csv(&src.input) {
        return Ok(read_templates(&src.input)?.remove(0));
    }
    if !is_image(&src.input) {
        return Err(Failure::local(format!("{}: expected a .pgm/.ppm image or a .csv template", src.input.display())));
    }
    let frame = read_image(&src.input)?;
    let detections = client.detect(&src.detector, &frame)?;
    let Some(best) = detections.iter().max_by_key(|d| (area(d), std::cmp::Reverse(d.detection_id))) else {
        return Err(Failure::remote(format!("no face found in {}", src.input.display())));
    };
    let mut templates = client.extract(&src.extractor, &frame, std::slice::from_ref(best))?;
    if templates.len() != 1 {
        return Err(Failure::remote(format!("extractor returned {} templates for one face", templates.len())));
    }
    Ok(templates.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_templates() {
        let ts = parse_templates("# probe\n1, 2.5,-3\n\n0,0,1\n").unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].vector, vec![1.0, 2.5, -3.0]);
        assert_eq!(format_template(&ts[0]), "1,2.5,-3");
        assert!(parse_templates("1,x").is_err());
        assert!(parse_templates("1,NaN").is_err());
        assert!(parse_templates("\n").is_err());
    }

    #[test]
    fn key_values() {
        assert_eq!(key_value("a=b=c").unwrap(), ("a".into(), "b=c".into()));
        assert!(key_value("=x").is_err());
        assert!(key_value("x").is_err());
    }
}
