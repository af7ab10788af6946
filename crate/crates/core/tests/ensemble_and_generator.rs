mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use common::*;
use ehr_rewrite::eval::{ensemble_predict, interpolated_proba, InferenceConfig};
use ehr_rewrite::predictor::{Architecture, PredictorModel};
use ehr_rewrite::rewriter::{delta_weights, external_generate, sample_rewrites, EndpointConfig};
use ehr_rewrite::{verbalize, Error};
use rand::Rng;

fn random_model(r: &mut rand_chacha::ChaCha8Rng) -> PredictorModel {
    let mut m = PredictorModel::zeros(Architecture { hash_dim: 256, hidden_units: 0 });
    for p in m.params.iter_mut() {
        *p = r.random_range(-2.0..2.0);
    }
    m
}

#[test]
fn alpha_zero_ignores_the_policy() {
    let mut r = rng(20);
    let cat = catalog();
    let model = random_model(&mut r);
    for k in 0..50 {
        let n = r.random_range(1..15);
        let e = ehr(&mut r, &format!("p{k}"), n);
        let config = InferenceConfig {
            alpha: 0.0,
            n_rewrites: r.random_range(1..6),
            seed: k,
        };
        let base = ensemble_predict(&model, &random_policy(&mut r, 1.0), &e, &cat, &config).unwrap();
        let p0 = model.predict_proba(&verbalize(&e, &cat).unwrap().text);
        assert_eq!(base.to_bits(), p0.to_bits());
        for _ in 0..5 {
            let other = ensemble_predict(&model, &random_policy(&mut r, 10.0), &e, &cat, &config).unwrap();
            assert_eq!(other.to_bits(), base.to_bits());
        }
    }
}

#[test]
fn single_rewrite_reduces_to_interpolation() {
    let mut r = rng(21);
    let cat = catalog();
    let model = random_model(&mut r);
    for k in 0..50 {
        let n = r.random_range(1..15);
        let e = ehr(&mut r, &format!("p{k}"), n);
        let policy = random_policy(&mut r, 2.0);
        let alpha = [0.0, 0.25, 0.5, 0.75, 1.0, r.random::<f64>()][k as usize % 6];
        let config = InferenceConfig { alpha, n_rewrites: 1, seed: k };
        let rw = &sample_rewrites(&policy, &e, &cat, 1, k).unwrap()[0];
        let rw_text = verbalize(&rw.materialize(&e).unwrap(), &cat).unwrap().text;
        let expected = interpolated_proba(&model, &verbalize(&e, &cat).unwrap().text, &rw_text, alpha);
        let got = ensemble_predict(&model, &policy, &e, &cat, &config).unwrap();
        assert_eq!(got.to_bits(), expected.to_bits());
    }
}

/// Serves one canned HTTP response and hands back the request body.
fn serve_once(status: &str, body: &str) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut headers = String::new();
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
            headers.push_str(&line);
        }
        let mut buf = vec![0; length];
        reader.read_exact(&mut buf).unwrap();
        let mut stream = stream;
        stream.write_all(response.as_bytes()).unwrap();
        tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
    });
    (url, rx)
}

#[test]
fn generator_round_trip_with_logprobs() {
    let (url, rx) = serve_once("200 OK", r#"{"texts":["- k: 4","- na: 140"],"logprobs":[-1.0,-2.0]}"#);
    let endpoint = EndpointConfig {
        token: Some("secret".into()),
        ..EndpointConfig::new(url)
    };
    let out = external_generate(&endpoint, "# lab\n- k: 4\n- na: 140", 2).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].text, "- na: 140");
    let (headers, body) = rx.recv().unwrap();
    assert!(headers.to_ascii_lowercase().contains("authorization: bearer secret"));
    let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(sent["n"], 2);
    assert_eq!(sent["want_logprobs"], true);
    let d = delta_weights(&out);
    let e = (1.0f64).exp();
    assert!((d[0] - e / (e + 1.0)).abs() < 1e-12);
}

#[test]
fn generator_without_logprobs_weights_uniformly() {
    let (url, _rx) = serve_once("200 OK", r#"{"texts":["a","b","c"]}"#);
    let out = external_generate(&EndpointConfig::new(url), "x", 3).unwrap();
    assert_eq!(delta_weights(&out), vec![1.0 / 3.0; 3]);
}

#[test]
fn generator_failures_are_typed() {
    let (url, _rx) = serve_once("500 Internal Server Error", "{}");
    assert!(matches!(external_generate(&EndpointConfig::new(url), "x", 1), Err(Error::EndpointUnavailable(_))));

    let (url, _rx) = serve_once("200 OK", "not json");
    assert!(matches!(external_generate(&EndpointConfig::new(url), "x", 1), Err(Error::MalformedResponse(_))));

    let (url, _rx) = serve_once("200 OK", r#"{"texts":["only one"]}"#);
    assert!(matches!(external_generate(&EndpointConfig::new(url), "x", 2), Err(Error::MalformedResponse(_))));

    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let endpoint = EndpointConfig {
        timeout_ms: 2000,
        ..EndpointConfig::new(format!("http://{closed}/generate"))
    };
    assert!(matches!(external_generate(&endpoint, "x", 1), Err(Error::EndpointUnavailable(_))));
}
