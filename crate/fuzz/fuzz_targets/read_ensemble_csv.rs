#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdesign::ensemble::Ensemble;

fuzz_target!(|data: &[u8]| {
    if let Ok(ens) = Ensemble::read_csv(data, 0.0) {
        let mut out = Vec::new();
        ens.write_csv(&mut out).expect("write to memory");
        let again = Ensemble::read_csv(out.as_slice(), 0.0).expect("written ensembles parse");
        assert_eq!(ens, again);
    }
});
