//! Checkpoint files against the reference `safetensors` implementation.

use std::collections::HashMap;

use demerge::checkpoint::{self, SPEC_KEY};
use demerge_core::inference::{init_weights, MlpSpec};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

fn spec() -> MlpSpec {
    MlpSpec::toy(4, 6)
}

#[test]
fn reference_reader_accepts_our_files() {
    let spec = spec();
    let w = init_weights(&spec, 3);
    let bytes = checkpoint::encode(&checkpoint::weights_to_map(&spec, &w));

    let st = SafeTensors::deserialize(&bytes).unwrap();
    let map = w.unflatten();
    assert_eq!(st.len(), map.len());
    for (name, tensor) in map.iter() {
        let view = st.tensor(name).unwrap();
        assert_eq!(view.dtype(), Dtype::F32);
        assert_eq!(view.shape(), tensor.shape());
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(values, tensor.data());
    }
    let (_, meta) = SafeTensors::read_metadata(&bytes).unwrap();
    let stored = meta.metadata().as_ref().unwrap();
    let back: MlpSpec = serde_json::from_str(&stored[SPEC_KEY]).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn we_read_reference_files() {
    let spec = spec();
    let w = init_weights(&spec, 5);
    let map = w.unflatten();
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = map
        .iter()
        .map(|(n, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.to_owned(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = raw
        .iter()
        .map(|(n, s, b)| {
            (
                n.clone(),
                TensorView::new(Dtype::F32, s.clone(), b).unwrap(),
            )
        })
        .collect();
    let meta = HashMap::from([(SPEC_KEY.to_owned(), serde_json::to_string(&spec).unwrap())]);
    let bytes = safetensors::serialize(views, Some(meta)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.safetensors");
    std::fs::write(&path, &bytes).unwrap();
    let (back_spec, back) = checkpoint::load_weights(&path).unwrap();
    assert_eq!(back_spec, spec);
    assert!(back.bits_eq(&w));
}

#[test]
fn reference_reader_accepts_files_without_metadata() {
    let w = init_weights(&spec(), 9);
    let bytes = checkpoint::encode(&w.unflatten());
    let st = SafeTensors::deserialize(&bytes).unwrap();
    assert_eq!(st.names().len(), w.unflatten().len());
}

#[test]
fn save_load_save_is_byte_identical() {
    let spec = spec();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    checkpoint::save_weights(&spec, &init_weights(&spec, 11), &a).unwrap();
    let map = checkpoint::load_checkpoint(&a).unwrap();
    checkpoint::save_checkpoint(&map, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
