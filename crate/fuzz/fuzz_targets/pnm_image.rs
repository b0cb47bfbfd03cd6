#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::image::{fit_image, read_pnm};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = read_pnm(data) else { return };
    let fitted = fit_image(&img, &[3, 32, 32]).expect("any decoded image fits");
    assert_eq!(fitted.shape(), &[3, 32, 32]);
});
