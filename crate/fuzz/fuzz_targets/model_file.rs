#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::modelfile::{load_model, save_model};

fuzz_target!(|data: &[u8]| {
    let Ok(model) = load_model(data) else { return };
    let bytes = save_model(&model);
    let again = load_model(&bytes).expect("saved model loads");
    assert_eq!(again.model_hash(), model.model_hash());
});
