#![no_main]

//! Input is `<manifest json> 0x00 <blob bytes>`.

use gssm_autodiff::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (head, rest) = data.split_at(split);
    let blob = rest.get(1..).unwrap_or(&[]);
    if let Ok(manifest) = std::str::from_utf8(head) {
        if let Ok(ckpt) = Checkpoint::decode(manifest, blob) {
            let (m, b) = ckpt.encode();
            let again = Checkpoint::decode(&m, &b).expect("re-encoded checkpoint decodes");
            assert_eq!(again.tensors.len(), ckpt.tensors.len());
        }
    }
});
