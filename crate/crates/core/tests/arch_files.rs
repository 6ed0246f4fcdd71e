use lrcnn_core::{analyzer, zoo, ArchSpec, Error, LayerSpec};

#[test]
fn every_zoo_model_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in zoo::model_names() {
        let arch = zoo::build(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        arch.save(&path).unwrap();
        let back = ArchSpec::load(&path).unwrap();
        assert_eq!(back, arch, "{name}");
        assert_eq!(
            analyzer::CostReport::of(&back).unwrap(),
            analyzer::CostReport::of(&arch).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn hand_written_file_loads() {
    let text = r#"
name = "hand"
input = [3, 8, 8]

[[layers]]
type = "composite"
in_channels = 3
composite = { groups = [{ kw = 3, kh = 1, d = 2 }, { kw = 1, kh = 3, d = 2 }], join = 4 }

[[layers]]
type = "relu"

[[layers]]
type = "global-max-pool"

[[layers]]
type = "dense"
inputs = 4
outputs = 10

[[layers]]
type = "softmax"
"#;
    let arch = ArchSpec::from_toml(text).unwrap();
    arch.validate().unwrap();
    assert_eq!(arch.output_shape().unwrap().c, 10);
}

#[test]
fn inconsistent_file_is_reported_by_layer() {
    let mut arch = zoo::build("desk-full").unwrap();
    arch.layers[0] = LayerSpec::conv(5, 32, 3, 3);
    let text = arch.to_toml().unwrap();
    match ArchSpec::from_toml(&text).unwrap().validate() {
        Err(Error::InvalidArch { issues, .. }) => assert_eq!(issues[0].layer, 0),
        other => panic!("expected InvalidArch, got {other:?}"),
    }
}
