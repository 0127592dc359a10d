use fexgan::trainer::TrainConfig;

#[test]
fn shipped_desk_config_is_the_desk_preset() {
    let text = include_str!("../../../configs/desk.toml");
    let parsed = TrainConfig::from_toml(text).unwrap();
    let mut preset = TrainConfig::desk("data");
    preset.seed = 1;
    assert_eq!(parsed, preset);
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = TrainConfig::desk("some/where");
    c.seed = 42;
    c.loss_weights.beta = 0.25;
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
}
