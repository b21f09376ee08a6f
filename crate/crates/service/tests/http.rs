use std::net::SocketAddr;
use std::sync::Arc;

use chromaset_core::bench::synthetic_image;
use chromaset_core::encoder::{encode, EncoderConfig};
use chromaset_core::imaging::{decode_png, downsample, encode_png, Image, Thumbnail};
use chromaset_core::pipeline::{fingerprint_hex, Pipeline, Style};
use chromaset_core::synth::desk_dataset;
use chromaset_core::trainer::{Checkpoint, Model};
use chromaset_service::wire::HEADER_LEN;
use chromaset_service::{
    remote_transfer, spawn, ClientSession, CountingRelay, Health, ParamResponse, ProjectionsResponse, RemoteClient,
    ServerConfig, ServerHandle, ServerState,
};
use reqwest::blocking::Client;
use reqwest::StatusCode;

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

/// k=16 model with encoder weights nudged away from initialization.
fn model(seed: u64) -> Model {
    let mut m = Model::init(&EncoderConfig { seed, ..EncoderConfig::default() }).unwrap();
    for (i, t) in m.encoder.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (((i * 31 + j * 17) % 13) as f32 / 6.0 - 1.0);
        }
    }
    m
}

fn server(model: Option<Model>) -> ServerHandle {
    spawn(local(), Arc::new(ServerState::new(model, ServerConfig::default()))).unwrap()
}

fn http() -> Client {
    Client::builder().no_proxy().build().unwrap()
}

fn post_png(url: &str, body: Vec<u8>) -> reqwest::blocking::Response {
    http().post(format!("{url}/v1/params")).body(body).send().unwrap()
}

fn png_of(img: &Image) -> Vec<u8> {
    encode_png(img).unwrap()
}

#[test]
fn health_and_hot_swap() {
    let srv = server(None);
    let client = RemoteClient::new(srv.url()).unwrap();
    let h = client.health().unwrap();
    assert_eq!(h, Health { status: "ok".into(), fingerprint: None });
    let raw = http().get(format!("{}/v1/health", srv.url())).send().unwrap().text().unwrap();
    assert_eq!(raw, r#"{"status":"ok","fingerprint":null}"#);

    let thumb = png_of(&desk_dataset(1, 64, 1)[0]);
    assert_eq!(post_png(&srv.url(), thumb.clone()).status(), StatusCode::SERVICE_UNAVAILABLE);
    let r = http().get(format!("{}/v1/projections", srv.url())).send().unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npck");
    Checkpoint::new(model(1)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let expect = fingerprint_hex(&loaded.fingerprint());
    srv.state().swap(Some(loaded.model));
    let h = client.health().unwrap();
    assert_eq!(h.fingerprint.as_deref(), Some(expect.as_str()));
    assert_eq!(h, client.health().unwrap());
    assert_eq!(post_png(&srv.url(), thumb).status(), StatusCode::OK);

    srv.state().swap(Some(model(2)));
    assert_ne!(client.health().unwrap().fingerprint.as_deref(), Some(expect.as_str()));
}

#[test]
fn params_match_local_encode() {
    let m = model(3);
    let srv = server(Some(m.clone()));
    let img = &desk_dataset(1, 64, 4)[0];
    let png = png_of(img);
    let resp = post_png(&srv.url(), png.clone());
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "application/octet-stream");
    let body = resp.bytes().unwrap();
    assert_eq!(body.len(), 2063);
    let parsed = ParamResponse::decode(&body).unwrap();
    let decoded = Thumbnail::from_image(decode_png(&png).unwrap()).unwrap();
    let (d, r) = encode(&decoded, &m.encoder).unwrap();
    assert_eq!(parsed.d, d);
    assert_eq!(parsed.r, r);
    assert_eq!(parsed.fingerprint, m.fingerprint());

    // purity
    let again = post_png(&srv.url(), png).bytes().unwrap();
    assert_eq!(again, body);
}

#[test]
fn params_resizes_other_sizes() {
    let m = model(5);
    let srv = server(Some(m.clone()));
    let img = synthetic_image(48, 100, 2);
    let png = png_of(&img);
    let parsed = ParamResponse::decode(&post_png(&srv.url(), png.clone()).bytes().unwrap()).unwrap();
    let thumb = downsample(&decode_png(&png).unwrap(), 64).unwrap();
    let (d, r) = encode(&thumb, &m.encoder).unwrap();
    assert_eq!((parsed.d, parsed.r), (d, r));
}

#[test]
fn params_rejects_bad_and_oversized() {
    let srv = server(Some(model(6)));
    let r = post_png(&srv.url(), b"definitely not a png".to_vec());
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert!(r.text().unwrap().contains("error"));

    let big = Image::filled(4096, 4096, [0.2, 0.4, 0.6]).unwrap();
    assert_eq!(post_png(&srv.url(), png_of(&big)).status(), StatusCode::PAYLOAD_TOO_LARGE);
    let wide = Image::filled(8, 257, [0.5; 3]).unwrap();
    assert_eq!(post_png(&srv.url(), png_of(&wide)).status(), StatusCode::PAYLOAD_TOO_LARGE);
    let edge = Image::filled(256, 256, [0.5; 3]).unwrap();
    assert_eq!(post_png(&srv.url(), png_of(&edge)).status(), StatusCode::OK);

    let huge_body = vec![0u8; ServerConfig::default().max_body_bytes + 1];
    assert_eq!(post_png(&srv.url(), huge_body).status(), StatusCode::PAYLOAD_TOO_LARGE);
}

#[test]
fn projections_cacheable() {
    let m = model(7);
    let srv = server(Some(m.clone()));
    let url = format!("{}/v1/projections", srv.url());
    let a = http().get(&url).send().unwrap();
    let etag = a.headers()["etag"].to_str().unwrap().to_string();
    assert_eq!(a.headers()["content-type"], "application/octet-stream");
    let a = a.bytes().unwrap();
    let b = http().get(&url).send().unwrap().bytes().unwrap();
    assert_eq!(a.len(), 783);
    assert_eq!(a, b);
    assert_eq!(ProjectionsResponse::decode(&a).unwrap(), ProjectionsResponse::from_model(&m));

    let r = http().get(&url).header("if-none-match", &etag).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_MODIFIED);
    let r = http().get(&url).header("if-none-match", "\"other\"").send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
}

#[test]
fn identity_projections_k3() {
    let cfg = EncoderConfig { k: 3, ..EncoderConfig::default() };
    let srv = server(Some(Model::identity(&cfg).unwrap()));
    let body = http().get(format!("{}/v1/projections", srv.url())).send().unwrap().bytes().unwrap();
    assert_eq!(body.len(), 15 + 4 * 9 * 4);
    let f: Vec<f32> = body[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for m in f.chunks(9) {
        assert_eq!(m, eye);
    }
}

#[test]
fn cors_headers() {
    let srv = server(Some(model(8)));
    let r = http()
        .get(format!("{}/v1/projections", srv.url()))
        .header("origin", "http://example.test")
        .send()
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "*");
    assert!(r.headers()["access-control-expose-headers"].to_str().unwrap().contains("etag"));
    let pre = http()
        .request(reqwest::Method::OPTIONS, format!("{}/v1/params", srv.url()))
        .header("origin", "http://example.test")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "content-type")
        .send()
        .unwrap();
    assert!(pre.status().is_success());
    assert_eq!(pre.headers()["access-control-allow-origin"], "*");
}

#[test]
fn split_matches_local_pipeline() {
    let m = model(9);
    let srv = server(Some(m.clone()));
    let client = RemoteClient::new(srv.url()).unwrap();
    let content = synthetic_image(150, 200, 3);
    let style = desk_dataset(1, 96, 10).remove(0);

    let session = ClientSession::open(&client, &content, 64).unwrap();
    let style_params = client.params(&style).unwrap();
    let remote = session.stylize(&style_params.r).unwrap();

    // the server sees the 8-bit thumbnail
    let q = |img: &Image| Thumbnail::from_image(decode_png(&encode_png(&downsample(img, 64).unwrap()).unwrap()).unwrap()).unwrap();
    let p = Pipeline::new(m).with_patch_size(64);
    let (d, _) = p.encode_thumbnail(&q(&content)).unwrap();
    let (_, r) = p.encode_thumbnail(&q(&style)).unwrap();
    let z = p.normalize_with(&content, &d).unwrap();
    let local = p.stylize(&z, Style::Matrix(&r)).unwrap();
    let worst = remote.data().iter().zip(local.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(worst <= 1e-6, "max diff {worst}");
    assert_eq!(session.normalized(), z.image());
}

#[test]
fn full_resolution_transfer_traffic() {
    let srv = server(Some(model(11)));
    let relay = CountingRelay::start(srv.addr()).unwrap();
    let client = RemoteClient::new(relay.url()).unwrap();
    let content = synthetic_image(4096, 4096, 12);
    let style = desk_dataset(1, 256, 13).remove(0);
    let out = remote_transfer(&client, &content, &style, None).unwrap();
    assert_eq!((out.height(), out.width()), (4096, 4096));
    let total = relay.total_bytes();
    assert!(total <= 64 * 1024, "{total} bytes over the network");
    assert!(relay.downstream_bytes() >= 2 * 2063 + 783);
}

#[test]
fn preset_switching_stays_local() {
    let m = model(14);
    let srv = server(Some(m.clone()));
    let relay = CountingRelay::start(srv.addr()).unwrap();
    let client = RemoteClient::new(relay.url()).unwrap();
    let img = desk_dataset(1, 80, 15).remove(0);
    let session = ClientSession::open(&client, &img, 32).unwrap();
    let presets: Vec<_> = desk_dataset(3, 64, 16)
        .iter()
        .enumerate()
        .map(|(i, s)| chromaset_core::presets::extract_preset(s, &m, format!("p{i}")).unwrap())
        .collect();
    let before = relay.total_bytes();
    let outs: Vec<Image> = presets.iter().map(|p| session.apply_preset(p).unwrap()).collect();
    assert_eq!(relay.total_bytes(), before);
    assert_ne!(outs[0], outs[1]);

    let mut foreign = presets[0].clone();
    foreign.fingerprint = [0; 8];
    assert!(session.apply_preset(&foreign).is_err());
}
