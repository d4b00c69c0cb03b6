#![no_main]

use fooling::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::decode(data) else { return };
    // whatever decodes must re-encode to a fixed point
    let bytes = ckpt.encode();
    let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(again.encode(), bytes);
    let _ = ckpt.arch();
    let _ = ckpt.params::<f32>();
});
