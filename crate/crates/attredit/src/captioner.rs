//! Region captioner and face parser client interfaces, their ground-truth
//! echo implementations, the HTTP captioner client and a local mock server
//! for tests.
//!
//! At desk scale the synthetic generator already knows the exact caption
//! and segmentation, so both traits receive that ground truth as a
//! reference argument: echo implementations return it, service-backed ones
//! ignore it. The HTTP wire format carries only the public fields: POST
//! JSON with a base64 PNG image, base64 PNG region mask and a template id;
//! the response is `{"caption": "..."}`.

use crate::fnv1a;
use anyhow::{anyhow, bail, Context, Result};
use attredit_core::conditioning::Caption;
use attredit_core::mask::{BinaryMask, SegMask};
use attredit_core::Tensor;
use base64::Engine;
use std::io::Cursor;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

pub trait CaptionerClient {
    fn caption(
        &self,
        image: &Tensor,
        region: &BinaryMask,
        template_id: u8,
        reference: &Caption,
    ) -> Result<String>;
}

pub trait ParserClient {
    fn parse(&self, image: &Tensor, reference: &SegMask) -> Result<SegMask>;
}

/// Echo the generator's ground-truth caption.
pub struct EchoCaptioner;

impl CaptionerClient for EchoCaptioner {
    fn caption(
        &self,
        _image: &Tensor,
        _region: &BinaryMask,
        _template_id: u8,
        reference: &Caption,
    ) -> Result<String> {
        Ok(reference.text.clone())
    }
}

/// Echo the generator's ground-truth segmentation.
pub struct EchoParser;

impl ParserClient for EchoParser {
    fn parse(&self, _image: &Tensor, reference: &SegMask) -> Result<SegMask> {
        Ok(reference.clone())
    }
}

/// A captioner that always fails; used to exercise the rejects path.
pub struct FailingCaptioner;

impl CaptionerClient for FailingCaptioner {
    fn caption(&self, _: &Tensor, _: &BinaryMask, _: u8, _: &Caption) -> Result<String> {
        bail!("captioner unavailable")
    }
}

fn png_bytes_image(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        bail!("expected 3 channels");
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| {
                ((t.data()[ch * h * w + i * w + j] + 1.0) * 127.5)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            img.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn png_bytes_mask(m: &BinaryMask) -> Result<Vec<u8>> {
    let mut img = image::GrayImage::new(m.width() as u32, m.height() as u32);
    for i in 0..m.height() {
        for j in 0..m.width() {
            img.put_pixel(j as u32, i as u32, image::Luma([m.get(i, j) * 255]));
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Captioner backed by an HTTP endpoint.
pub struct HttpCaptioner {
    pub endpoint: String,
}

impl CaptionerClient for HttpCaptioner {
    fn caption(
        &self,
        image: &Tensor,
        region: &BinaryMask,
        template_id: u8,
        _reference: &Caption,
    ) -> Result<String> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = serde_json::json!({
            "image": b64.encode(png_bytes_image(image)?),
            "mask": b64.encode(png_bytes_mask(region)?),
            "template_id": template_id,
        });
        let text = ureq::post(&self.endpoint)
            .set("content-type", "application/json")
            .send_string(&body.to_string())
            .with_context(|| format!("POST {}", self.endpoint))?
            .into_string()?;
        let resp: serde_json::Value = serde_json::from_str(&text)?;
        resp.get("caption")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| anyhow!("response missing caption field"))
    }
}

/// Local mock captioning service for tests. Responses are a pure function
/// of the request (template id + mask content hash), so runs are
/// reproducible.
pub struct MockCaptionServer {
    pub endpoint: String,
    stop: Arc<AtomicBool>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockCaptionServer {
    pub fn spawn() -> Result<MockCaptionServer> {
        let server = Arc::new(
            tiny_http::Server::http("127.0.0.1:0").map_err(|e| anyhow!("mock server: {e}"))?,
        );
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => a,
            _ => bail!("unexpected listener type"),
        };
        let endpoint = format!("http://{addr}/caption");
        let stop = Arc::new(AtomicBool::new(false));
        let srv = Arc::clone(&server);
        let stop_flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let reply = match serde_json::from_str::<serde_json::Value>(&body) {
                    Ok(v) => {
                        let tid = v.get("template_id").and_then(|t| t.as_u64()).unwrap_or(0);
                        let mask_hash = v
                            .get("mask")
                            .and_then(|m| m.as_str())
                            .map(|m| fnv1a(m.as_bytes()))
                            .unwrap_or(0);
                        serde_json::json!({
                            "caption": format!("service caption t{tid} m{mask_hash:016x}")
                        })
                    }
                    Err(e) => serde_json::json!({ "error": e.to_string() }),
                };
                let data = reply.to_string();
                let response = tiny_http::Response::from_string(data).with_header(
                    tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                        .expect("static header"),
                );
                let _ = req.respond(response);
            }
        });
        Ok(MockCaptionServer {
            endpoint,
            stop,
            server,
            handle: Some(handle),
        })
    }
}

impl Drop for MockCaptionServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
