use chromaset_core::dncm::{ColorMapMatrix, ProjectionPair, Role};
use chromaset_core::encoder::EncoderConfig;
use chromaset_core::trainer::Model;
use chromaset_service::wire::{params_len, projections_len, HEADER_LEN, WIRE_VERSION};
use chromaset_service::{ParamResponse, ProjectionsResponse};
use proptest::prelude::*;

#[test]
fn k16_body_sizes() {
    assert_eq!(params_len(16), 2063);
    assert_eq!(projections_len(16), 783);
    let resp = ParamResponse {
        fingerprint: [7; 8],
        d: ColorMapMatrix::identity(16),
        r: ColorMapMatrix::identity(16),
    };
    assert_eq!(resp.encode().len(), 2063);
    assert_eq!(resp.d.values().len(), 256);
    let model = Model::init(&EncoderConfig::default()).unwrap();
    assert_eq!(ProjectionsResponse::from_model(&model).encode().len(), 783);
}

#[test]
fn params_layout() {
    let d: Vec<f32> = (0..4).map(|i| i as f32).collect();
    let r: Vec<f32> = (0..4).map(|i| -(i as f32)).collect();
    let resp = ParamResponse {
        fingerprint: [1, 2, 3, 4, 5, 6, 7, 8],
        d: ColorMapMatrix::new(2, d).unwrap(),
        r: ColorMapMatrix::new(2, r).unwrap(),
    };
    let b = resp.encode();
    assert_eq!(&b[..4], b"NPPR");
    assert_eq!(b[4], WIRE_VERSION);
    assert_eq!(&b[5..7], &[2, 0]);
    assert_eq!(&b[7..15], &[1, 2, 3, 4, 5, 6, 7, 8]);
    assert_eq!(&b[HEADER_LEN + 4..HEADER_LEN + 8], &1f32.to_le_bytes());
    assert_eq!(&b[HEADER_LEN + 20..HEADER_LEN + 24], &(-1f32).to_le_bytes());
}

#[test]
fn projections_order() {
    let model = Model::init(&EncoderConfig { k: 5, ..EncoderConfig::default() }).unwrap();
    let resp = ProjectionsResponse::from_model(&model);
    let b = resp.encode();
    assert_eq!(&b[..4], b"NPPJ");
    let floats: Vec<f32> = b[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let expect: Vec<f32> = [model.normalizing.p(), model.normalizing.q(), model.stylizing.p(), model.stylizing.q()].concat();
    assert_eq!(floats, expect);
    assert_eq!(ProjectionsResponse::decode(&b).unwrap(), resp);
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, n)
}

proptest! {
    #[test]
    fn params_roundtrip_bitwise(k in 1usize..20, seed in any::<u64>(), fp in any::<[u8; 8]>()) {
        let mut x = seed;
        let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 40) as f32 / 1e4 - 800.0 };
        let d = (0..k * k).map(|_| next()).collect();
        let r = (0..k * k).map(|_| next()).collect();
        let resp = ParamResponse { fingerprint: fp, d: ColorMapMatrix::new(k, d).unwrap(), r: ColorMapMatrix::new(k, r).unwrap() };
        let bytes = resp.encode();
        prop_assert_eq!(bytes.len(), params_len(k));
        let back = ParamResponse::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, resp);
    }

    #[test]
    fn projections_roundtrip_bitwise(pn in values(24), qn in values(24), ps in values(24), qs in values(24), fp in any::<[u8; 8]>()) {
        let resp = ProjectionsResponse {
            fingerprint: fp,
            normalizing: ProjectionPair::new(Role::Normalizing, 8, pn, qn).unwrap(),
            stylizing: ProjectionPair::new(Role::Stylizing, 8, ps, qs).unwrap(),
        };
        let bytes = resp.encode();
        prop_assert_eq!(bytes.len(), projections_len(8));
        prop_assert_eq!(ProjectionsResponse::decode(&bytes).unwrap(), resp);
    }
}
