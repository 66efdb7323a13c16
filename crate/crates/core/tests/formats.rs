//! Golden encodings of the on-disk formats.

use cloudlift::decimal::{format_f32, parse_f32};
use cloudlift::params_io::{parse_table, write_table};
use cloudlift::raster::{decode_header, decode_payload, encode_header, encode_payload, RasterHeader};
use cloudlift::Tensor;

#[test]
fn raster_header_text_is_pinned() {
    let t = Tensor::new(2, 1, 2, vec![0.0, 1.0, -2.5, 0.5]).unwrap();
    let h = RasterHeader::for_tensor(&t, &["blue".into(), "swir1".into()]);
    let text = encode_header(&h);
    let want = r#"{
  "width": 2,
  "height": 1,
  "bands": 2,
  "band_names": [
    "blue",
    "swir1"
  ],
  "dtype": "float32",
  "interleave": "band-sequential",
  "byte_order": "little-endian"
}
"#;
    assert_eq!(text, want);
    assert_eq!(decode_header(&text).unwrap(), h);
    let bytes = encode_payload(&t);
    assert_eq!(
        bytes,
        [0, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0, 0x20, 0xc0, 0, 0, 0, 0x3f]
    );
    assert_eq!(decode_payload(&h, &bytes).unwrap(), t);
}

#[test]
fn table_rows_use_nine_significant_digits() {
    let text = write_table([("a.b", 0, 1.0f32), ("a.b", 1, -0.0), ("c", 0, 1e-45), ("c", 1, 3.4028235e38)]);
    assert_eq!(
        text,
        "tensor_name,flat_index,value\n\
         a.b,0,1.000000000e+00\n\
         a.b,1,-0.000000000e+00\n\
         c,0,1.000000000e-45\n\
         c,1,3.402823500e+38\n"
    );
    let rows = parse_table(&text).unwrap();
    assert_eq!(rows[1].1.value.to_bits(), (-0.0f32).to_bits());
    assert_eq!(rows[2].1.value.to_bits(), 1);
}

#[test]
fn decimal_rendering_round_trips_edge_values() {
    for v in [0.0f32, -0.0, f32::MIN_POSITIVE, f32::EPSILON, f32::MAX, f32::MIN, 0.1, 1.0 / 3.0] {
        assert_eq!(parse_f32(&format_f32(v)).unwrap().to_bits(), v.to_bits(), "{v:e}");
    }
}
