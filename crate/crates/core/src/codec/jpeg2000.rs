//! Minimal in-memory JPEG2000 encode/decode on top of libopenjpeg.
//!
//! The safe wrappers in the ecosystem only encode to files and do not expose
//! rate control, so this module drives the C API directly with memory-backed
//! streams. `ratio` is the single compression-ratio layer of the irreversible
//! 9-7 transform; larger ratios mean more loss.

use std::ffi::CStr;
use std::os::raw::c_void;

use openjpeg_sys as opj;

pub fn library_version() -> String {
    unsafe {
        CStr::from_ptr(opj::opj_version())
            .to_string_lossy()
            .into_owned()
    }
}

struct WriteState {
    data: Vec<u8>,
    pos: usize,
}

unsafe extern "C" fn write_cb(buf: *mut c_void, n: usize, user: *mut c_void) -> usize {
    let w = &mut *(user as *mut WriteState);
    let src = std::slice::from_raw_parts(buf as *const u8, n);
    let end = w.pos + n;
    if end > w.data.len() {
        w.data.resize(end, 0);
    }
    w.data[w.pos..end].copy_from_slice(src);
    w.pos = end;
    n
}

unsafe extern "C" fn write_skip_cb(n: i64, user: *mut c_void) -> i64 {
    let w = &mut *(user as *mut WriteState);
    w.pos = (w.pos as i64 + n) as usize;
    if w.pos > w.data.len() {
        w.data.resize(w.pos, 0);
    }
    n
}

unsafe extern "C" fn write_seek_cb(n: i64, user: *mut c_void) -> i32 {
    let w = &mut *(user as *mut WriteState);
    w.pos = n as usize;
    if w.pos > w.data.len() {
        w.data.resize(w.pos, 0);
    }
    1
}

struct ReadState<'a> {
    data: &'a [u8],
    pos: usize,
}

unsafe extern "C" fn read_cb(buf: *mut c_void, n: usize, user: *mut c_void) -> usize {
    let r = &mut *(user as *mut ReadState);
    let avail = r.data.len().saturating_sub(r.pos);
    if avail == 0 {
        // openjpeg's end-of-stream sentinel
        return usize::MAX;
    }
    let k = n.min(avail);
    std::ptr::copy_nonoverlapping(r.data.as_ptr().add(r.pos), buf as *mut u8, k);
    r.pos += k;
    k
}

unsafe extern "C" fn read_skip_cb(n: i64, user: *mut c_void) -> i64 {
    let r = &mut *(user as *mut ReadState);
    r.pos = (r.pos as i64 + n).max(0) as usize;
    n
}

unsafe extern "C" fn read_seek_cb(n: i64, user: *mut c_void) -> i32 {
    let r = &mut *(user as *mut ReadState);
    if n < 0 || n as usize > r.data.len() {
        return 0;
    }
    r.pos = n as usize;
    1
}

/// Guards that release openjpeg resources on every exit path.
struct Codec(*mut opj::opj_codec_t);
impl Drop for Codec {
    fn drop(&mut self) {
        unsafe { opj::opj_destroy_codec(self.0) }
    }
}
struct Stream(*mut opj::opj_stream_t);
impl Drop for Stream {
    fn drop(&mut self) {
        unsafe { opj::opj_stream_destroy(self.0) }
    }
}
struct OwnedImage(*mut opj::opj_image_t);
impl Drop for OwnedImage {
    fn drop(&mut self) {
        unsafe { opj::opj_image_destroy(self.0) }
    }
}

pub fn encode(rgb: &[u8], width: u32, height: u32, ratio: f32) -> Result<Vec<u8>, String> {
    assert_eq!(rgb.len(), (width * height * 3) as usize);
    unsafe {
        let mut comp_params = [std::mem::zeroed::<opj::opj_image_comptparm>(); 3];
        for p in comp_params.iter_mut() {
            p.dx = 1;
            p.dy = 1;
            p.w = width;
            p.h = height;
            p.x0 = 0;
            p.y0 = 0;
            p.prec = 8;
            p.bpp = 8;
            p.sgnd = 0;
        }
        let img_ptr = opj::opj_image_create(
            3,
            comp_params.as_mut_ptr(),
            opj::COLOR_SPACE::OPJ_CLRSPC_SRGB,
        );
        if img_ptr.is_null() {
            return Err("opj_image_create failed".into());
        }
        let img = OwnedImage(img_ptr);
        (*img.0).x0 = 0;
        (*img.0).y0 = 0;
        (*img.0).x1 = width;
        (*img.0).y1 = height;
        let comps = std::slice::from_raw_parts_mut((*img.0).comps, 3);
        let plane = (width * height) as usize;
        for (ci, comp) in comps.iter_mut().enumerate() {
            let dst = std::slice::from_raw_parts_mut(comp.data, plane);
            for (i, d) in dst.iter_mut().enumerate() {
                *d = rgb[i * 3 + ci] as i32;
            }
        }

        let mut params = std::mem::zeroed::<opj::opj_cparameters_t>();
        opj::opj_set_default_encoder_parameters(&mut params);
        params.tcp_numlayers = 1;
        params.tcp_rates[0] = ratio;
        params.cp_disto_alloc = 1;
        params.irreversible = 1;

        let codec = Codec(opj::opj_create_compress(opj::CODEC_FORMAT::OPJ_CODEC_JP2));
        if opj::opj_setup_encoder(codec.0, &mut params, img.0) != 1 {
            return Err("opj_setup_encoder failed".into());
        }

        let stream = Stream(opj::opj_stream_default_create(0));
        let mut wstate = WriteState {
            data: Vec::new(),
            pos: 0,
        };
        opj::opj_stream_set_user_data(stream.0, &mut wstate as *mut _ as *mut c_void, None);
        opj::opj_stream_set_write_function(stream.0, Some(write_cb));
        opj::opj_stream_set_skip_function(stream.0, Some(write_skip_cb));
        opj::opj_stream_set_seek_function(stream.0, Some(write_seek_cb));

        if opj::opj_start_compress(codec.0, img.0, stream.0) != 1 {
            return Err("opj_start_compress failed".into());
        }
        if opj::opj_encode(codec.0, stream.0) != 1 {
            return Err("opj_encode failed".into());
        }
        if opj::opj_end_compress(codec.0, stream.0) != 1 {
            return Err("opj_end_compress failed".into());
        }
        Ok(wstate.data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), String> {
    unsafe {
        let codec = Codec(opj::opj_create_decompress(
            opj::CODEC_FORMAT::OPJ_CODEC_JP2,
        ));
        let mut dparams = std::mem::zeroed::<opj::opj_dparameters_t>();
        opj::opj_set_default_decoder_parameters(&mut dparams);
        if opj::opj_setup_decoder(codec.0, &mut dparams) != 1 {
            return Err("opj_setup_decoder failed".into());
        }

        let stream = Stream(opj::opj_stream_default_create(1));
        let mut rstate = ReadState {
            data: bytes,
            pos: 0,
        };
        opj::opj_stream_set_user_data(stream.0, &mut rstate as *mut _ as *mut c_void, None);
        opj::opj_stream_set_user_data_length(stream.0, bytes.len() as u64);
        opj::opj_stream_set_read_function(stream.0, Some(read_cb));
        opj::opj_stream_set_skip_function(stream.0, Some(read_skip_cb));
        opj::opj_stream_set_seek_function(stream.0, Some(read_seek_cb));

        let mut img_ptr: *mut opj::opj_image_t = std::ptr::null_mut();
        if opj::opj_read_header(stream.0, codec.0, &mut img_ptr) != 1 {
            return Err("opj_read_header failed".into());
        }
        let img = OwnedImage(img_ptr);
        if opj::opj_decode(codec.0, stream.0, img.0) != 1 {
            return Err("opj_decode failed".into());
        }
        if opj::opj_end_decompress(codec.0, stream.0) != 1 {
            return Err("opj_end_decompress failed".into());
        }

        let width = (*img.0).x1 - (*img.0).x0;
        let height = (*img.0).y1 - (*img.0).y0;
        let numcomps = (*img.0).numcomps as usize;
        if numcomps < 3 {
            return Err(format!("expected 3 components, got {numcomps}"));
        }
        let comps = std::slice::from_raw_parts((*img.0).comps, numcomps);
        let plane = (width * height) as usize;
        let mut rgb = vec![0u8; plane * 3];
        for ci in 0..3 {
            let src = std::slice::from_raw_parts(comps[ci].data, plane);
            for (i, s) in src.iter().enumerate() {
                rgb[i * 3 + ci] = (*s).clamp(0, 255) as u8;
            }
        }
        Ok((width, height, rgb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_reports_dimensions() {
        let rgb: Vec<u8> = (0..32 * 32 * 3).map(|i| ((i * 3) % 256) as u8).collect();
        let bytes = encode(&rgb, 32, 32, 30.0).unwrap();
        let (w, h, out) = decode(&bytes).unwrap();
        assert_eq!((w, h), (32, 32));
        assert_eq!(out.len(), rgb.len());
    }

    #[test]
    fn garbage_bytes_fail_cleanly() {
        assert!(decode(&[0u8; 64]).is_err());
    }
}
