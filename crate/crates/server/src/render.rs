use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array3;

/// Maps a `(3, H, W)` image in `[-1, 1]` to 8-bit RGB, clamping outliers.
pub fn to_rgb8(image: &Array3<f64>) -> Vec<u8> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "expected an RGB image");
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = ((image[[ch, i, j]] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    out
}

pub fn encode_png(image: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = image.dim();
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory png header");
        writer.write_image_data(&to_rgb8(image)).expect("in-memory png data");
    }
    bytes
}

pub fn png_base64(image: &Array3<f64>) -> String {
    STANDARD.encode(encode_png(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_range_endpoints_and_clamps() {
        let mut img = Array3::zeros((3, 1, 3));
        img[[0, 0, 0]] = -1.0;
        img[[0, 0, 1]] = 1.0;
        img[[0, 0, 2]] = 5.0;
        img[[1, 0, 0]] = -7.0;
        let rgb = to_rgb8(&img);
        assert_eq!(&rgb[0..3], &[0, 0, 128]);
        assert_eq!(rgb[3], 255);
        assert_eq!(rgb[6], 255);
    }

    #[test]
    fn png_decodes_back_to_same_pixels() {
        let img = Array3::from_shape_fn((3, 4, 5), |(c, i, j)| ((c + i * 5 + j) as f64 / 30.0) * 2.0 - 1.0);
        let bytes = encode_png(&img);
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 4));
        assert_eq!(&buf[..info.buffer_size()], to_rgb8(&img).as_slice());
    }
}
