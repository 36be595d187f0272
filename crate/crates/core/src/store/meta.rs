//! GPS metadata from EXIF blocks, and the inverse for building test imagery.

use std::io::Cursor;

use exif::{experimental::Writer, Field, In, Rational, Tag, Value};

use crate::geolocate::ImageMeta;

/// `deg + min/60 + sec/3600`, negated for the southern and western
/// hemispheres.
pub fn dms_to_degrees(deg: f64, min: f64, sec: f64, hemisphere: &str) -> f64 {
    let v = deg + min / 60.0 + sec / 3600.0;
    match hemisphere.trim().to_ascii_uppercase().as_str() {
        "S" | "W" => -v,
        _ => v,
    }
}

fn rationals(f: Option<&Field>) -> Option<Vec<f64>> {
    match &f?.value {
        Value::Rational(v) if v.iter().all(|r| r.denom != 0) => {
            Some(v.iter().map(Rational::to_f64).collect())
        }
        _ => None,
    }
}

fn ascii(f: Option<&Field>) -> Option<String> {
    match &f?.value {
        Value::Ascii(v) => v.first().map(|s| String::from_utf8_lossy(s).into_owned()),
        _ => None,
    }
}

fn coordinate(exif: &exif::Exif, value: Tag, reference: Tag) -> Option<f64> {
    let dms = rationals(exif.get_field(value, In::PRIMARY))?;
    let hemi = ascii(exif.get_field(reference, In::PRIMARY)).unwrap_or_default();
    match dms.as_slice() {
        [d, m, s] => Some(dms_to_degrees(*d, *m, *s, &hemi)),
        [d, m] => Some(dms_to_degrees(*d, *m, 0.0, &hemi)),
        [d] => Some(dms_to_degrees(*d, 0.0, 0.0, &hemi)),
        _ => None,
    }
}

/// GPS position, altitude and heading from the image's EXIF block. `None`
/// when any of latitude, longitude or altitude is missing or malformed.
pub fn read_gps(bytes: &[u8]) -> Option<ImageMeta> {
    let exif = exif::Reader::new()
        .read_from_container(&mut Cursor::new(bytes))
        .ok()?;
    let latitude = coordinate(&exif, Tag::GPSLatitude, Tag::GPSLatitudeRef)?;
    let longitude = coordinate(&exif, Tag::GPSLongitude, Tag::GPSLongitudeRef)?;
    let mut altitude = *rationals(exif.get_field(Tag::GPSAltitude, In::PRIMARY))?.first()?;
    if let Some(Value::Byte(b)) = exif.get_field(Tag::GPSAltitudeRef, In::PRIMARY).map(|f| &f.value) {
        if b.first() == Some(&1) {
            altitude = -altitude;
        }
    }
    let heading = rationals(exif.get_field(Tag::GPSImgDirection, In::PRIMARY))
        .and_then(|v| v.first().copied())
        .unwrap_or(0.0);
    let captured_at = ascii(exif.get_field(Tag::DateTimeOriginal, In::PRIMARY));
    let meta = ImageMeta {
        latitude,
        longitude,
        altitude,
        heading,
        captured_at,
    };
    meta.validate().ok()?;
    Some(meta)
}

fn to_dms(value: f64) -> Vec<Rational> {
    let v = value.abs();
    let deg = v.floor();
    let min = ((v - deg) * 60.0).floor();
    let sec = (v - deg) * 3600.0 - min * 60.0;
    vec![
        Rational { num: deg as u32, denom: 1 },
        Rational { num: min as u32, denom: 1 },
        Rational { num: (sec * 10_000.0).round() as u32, denom: 10_000 },
    ]
}

fn field(tag: Tag, value: Value) -> Field {
    Field {
        tag,
        ifd_num: In::PRIMARY,
        value,
    }
}

/// Insert an EXIF APP1 segment carrying `meta` right after the JPEG SOI
/// marker. Seconds are stored to 1e-4, altitude and heading to 1e-2.
pub fn embed_gps_jpeg(jpeg: &[u8], meta: &ImageMeta) -> Result<Vec<u8>, String> {
    if jpeg.len() < 2 || jpeg[..2] != [0xFF, 0xD8] {
        return Err("not a JPEG stream".into());
    }
    let ns = if meta.latitude < 0.0 { "S" } else { "N" };
    let ew = if meta.longitude < 0.0 { "W" } else { "E" };
    let mut fields = vec![
        field(Tag::GPSLatitudeRef, Value::Ascii(vec![ns.as_bytes().to_vec()])),
        field(Tag::GPSLatitude, Value::Rational(to_dms(meta.latitude))),
        field(Tag::GPSLongitudeRef, Value::Ascii(vec![ew.as_bytes().to_vec()])),
        field(Tag::GPSLongitude, Value::Rational(to_dms(meta.longitude))),
        field(Tag::GPSAltitudeRef, Value::Byte(vec![u8::from(meta.altitude < 0.0)])),
        field(
            Tag::GPSAltitude,
            Value::Rational(vec![Rational { num: (meta.altitude.abs() * 100.0).round() as u32, denom: 100 }]),
        ),
        field(Tag::GPSImgDirectionRef, Value::Ascii(vec![b"T".to_vec()])),
        field(
            Tag::GPSImgDirection,
            Value::Rational(vec![Rational {
                num: (meta.heading.rem_euclid(360.0) * 100.0).round() as u32,
                denom: 100,
            }]),
        ),
    ];
    if let Some(t) = &meta.captured_at {
        fields.push(field(Tag::DateTimeOriginal, Value::Ascii(vec![t.as_bytes().to_vec()])));
    }
    let mut writer = Writer::new();
    for f in &fields {
        writer.push_field(f);
    }
    let mut tiff = Cursor::new(Vec::new());
    writer.write(&mut tiff, true).map_err(|e| e.to_string())?;
    let tiff = tiff.into_inner();
    let len = 2 + 6 + tiff.len();
    if len > u16::MAX as usize {
        return Err("EXIF block too large".into());
    }
    let mut out = Vec::with_capacity(jpeg.len() + len + 2);
    out.extend_from_slice(&jpeg[..2]);
    out.extend_from_slice(&[0xFF, 0xE1]);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(b"Exif\0\0");
    out.extend_from_slice(&tiff);
    out.extend_from_slice(&jpeg[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_jpeg() -> Vec<u8> {
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([120, 130, 140]));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
        out.into_inner()
    }

    #[test]
    fn degree_minute_second_arithmetic() {
        assert_eq!(dms_to_degrees(43.0, 0.0, 0.0, "N"), 43.0);
        assert_eq!(dms_to_degrees(69.0, 0.0, 0.0, "W"), -69.0);
        assert_eq!(dms_to_degrees(43.0, 30.0, 0.0, "N"), 43.5);
        assert_eq!(dms_to_degrees(12.0, 0.0, 36.0, "S"), -12.01);
    }

    #[test]
    fn embedded_gps_reads_back() {
        let meta = ImageMeta {
            latitude: 43.0,
            longitude: -69.0,
            altitude: 44.7,
            heading: 0.0,
            captured_at: Some("2023:07:14 10:21:07".into()),
        };
        let jpeg = embed_gps_jpeg(&tiny_jpeg(), &meta).unwrap();
        assert!(image::load_from_memory(&jpeg).is_ok());
        let got = read_gps(&jpeg).unwrap();
        assert_eq!(got.latitude, 43.0);
        assert_eq!(got.longitude, -69.0);
        assert!((got.altitude - 44.7).abs() < 1e-12);
        assert_eq!(got.captured_at, meta.captured_at);
    }

    #[test]
    fn fractional_coordinates_survive_to_a_millimeter() {
        let meta = ImageMeta {
            latitude: -32.297_123_4,
            longitude: 64.781_987_6,
            altitude: 60.25,
            heading: 271.5,
            captured_at: None,
        };
        let got = read_gps(&embed_gps_jpeg(&tiny_jpeg(), &meta).unwrap()).unwrap();
        assert!((got.latitude - meta.latitude).abs() < 1e-7);
        assert!((got.longitude - meta.longitude).abs() < 1e-7);
        assert_eq!(got.heading, 271.5);
    }

    #[test]
    fn missing_exif_is_unmapped() {
        assert!(read_gps(&tiny_jpeg()).is_none());
        assert!(read_gps(b"garbage").is_none());
    }
}
