//! At small hidden sizes the full extraction pipeline breaks the ellipse MAC:
//! the harvested samples recover the key well enough to mint accepted tags.

use ellsig_core::mac::{keygen, sign, verify, ReplayStore, SignedMessage};
use ellsig_core::recovery::recover_rms;
use ellsig_provider::{run_attack, serve, ApiClient, ApiConfig, AttackOptions};

#[tokio::test]
async fn extracted_key_forges_accepted_signatures() {
    let (v, d) = (256, 16);
    let key = keygen(v, d, 2024).unwrap();
    let cfg = ApiConfig::new(key.params.clone(), 8);
    let server = serve(&cfg, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let client = ApiClient::new(server.base_url(), v, 8, 0.0).unwrap();
    let mut opts = AttackOptions::new(170);
    opts.d = Some(d);
    let res = run_attack(&client, &opts).await.unwrap();
    let stolen = recover_rms(&res.samples).unwrap();

    let store = ReplayStore::in_memory();
    for i in 0..20 {
        let mut z: Vec<f64> = (0..stolen.d()).map(|j| ((i * 31 + j * 7) as f64).sin()).collect();
        let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        z.iter_mut().for_each(|x| *x /= n);
        let forged = SignedMessage {
            logprob: stolen.logprobs_at(&z).unwrap(),
            key_id: key.key_id.clone(),
            sequence_index: i as u64,
        };
        let report = verify(&key, &forged, &store, true).unwrap();
        assert!(report.accepted(), "forgery {i} rejected: {:?}", report.report);
    }

    let genuine = sign(&key, b"hello").unwrap();
    assert!(verify(&key, &genuine, &store, true).unwrap().accepted());
    server.shutdown().await.unwrap();
}
