#![no_main]

use libfuzzer_sys::fuzz_target;
use sfkit::pointcloud::{decode_scene, encode_scene};

fuzz_target!(|data: &[u8]| {
    if let Ok(scene) = decode_scene(data) {
        // anything that decodes must survive a round trip
        let bytes = encode_scene(&scene).expect("decoded scene re-encodes");
        let again = decode_scene(&bytes).expect("re-encoded scene decodes");
        assert_eq!(again.frames.len(), scene.frames.len());
    }
});
