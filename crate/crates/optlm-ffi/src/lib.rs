//! C ABI over the trained models: load a checkpoint, generate with a chosen
//! option-selection rule, and inspect per-option tables. All entry points
//! return an `OptlmStatus`; details of the last failure are available per
//! thread through `optlm_last_error`.

use libc::{c_char, size_t};
use optlm::checkpoint::load_model;
use optlm::error::Error;
use optlm::plugin::{generate, Decoding, LatentMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

/// Status codes shared with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptlmStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    /// Null pointer, bad UTF-8 or an undersized buffer from the caller.
    BadArgument = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: OptlmStatus, message: String) -> OptlmStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("no interior NUL");
    });
    status
}

fn fail_err(err: Error) -> OptlmStatus {
    let status = match err.exit_code() {
        2 => OptlmStatus::Config,
        3 => OptlmStatus::Data,
        4 => OptlmStatus::Numeric,
        5 => OptlmStatus::Checkpoint,
        _ => OptlmStatus::Internal,
    };
    fail(status, err.to_string())
}

/// Opaque handle to a loaded model (frozen backbone plus, when the
/// checkpoint holds one, the option plug-in).
pub struct OptlmModel {
    backbone: optlm::backbone::BackboneParams<f32>,
    plugin: Option<optlm::plugin::PluginParams<f32>>,
}

/// How the option is chosen at each generation step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptlmLatentMode {
    PolicyArgmax = 0,
    PolicySample = 1,
    /// Uses the `fixed_option` argument (1-based).
    Fixed = 2,
}

/// Copy the message of the last failure on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length,
/// not counting the NUL.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn optlm_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load a checkpoint file. On success `*out` owns the model; release it with
/// `optlm_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn optlm_model_load(
    path: *const c_char,
    out: *mut *mut OptlmModel,
) -> OptlmStatus {
    if path.is_null() || out.is_null() {
        return fail(OptlmStatus::BadArgument, "null pointer".into());
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p,
        Err(_) => return fail(OptlmStatus::BadArgument, "path is not valid UTF-8".into()),
    };
    match load_model::<f32>(Path::new(path)) {
        Ok((backbone, plugin)) => {
            *out = Box::into_raw(Box::new(OptlmModel { backbone, plugin }));
            OptlmStatus::Ok
        }
        Err(e) => fail_err(e),
    }
}

/// Release a model returned by `optlm_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must come from `optlm_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn optlm_model_free(model: *mut OptlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the loaded model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn optlm_vocab_size(model: *const OptlmModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).backbone.config.vocab_size
}

/// Number of options K, or 0 when the checkpoint has no plug-in.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn optlm_option_count(model: *const OptlmModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).plugin.as_ref().map_or(0, |p| p.config.k)
}

/// Generate `steps` tokens after `prefix`. `out_tokens` receives
/// `prefix_len + steps` tokens and `out_options` the 1-based option id used
/// at each step. `temperature <= 0` selects greedy decoding.
///
/// # Safety
/// `model` must be live; `prefix` must hold `prefix_len` tokens;
/// `out_tokens` and `out_options` must have the capacities described above.
#[no_mangle]
pub unsafe extern "C" fn optlm_generate(
    model: *const OptlmModel,
    prefix: *const u32,
    prefix_len: size_t,
    steps: size_t,
    latent_mode: OptlmLatentMode,
    fixed_option: size_t,
    temperature: f64,
    seed: u64,
    out_tokens: *mut u32,
    out_options: *mut u32,
) -> OptlmStatus {
    if model.is_null() || prefix.is_null() || out_tokens.is_null() || out_options.is_null() {
        return fail(OptlmStatus::BadArgument, "null pointer".into());
    }
    let model = &*model;
    let plugin = match &model.plugin {
        Some(p) => p,
        None => {
            return fail(
                OptlmStatus::Checkpoint,
                "checkpoint holds no plug-in; generation needs one".into(),
            )
        }
    };
    let prefix = std::slice::from_raw_parts(prefix, prefix_len);
    let mode = match latent_mode {
        OptlmLatentMode::PolicyArgmax => LatentMode::PolicyArgmax,
        OptlmLatentMode::PolicySample => LatentMode::PolicySample,
        OptlmLatentMode::Fixed => {
            if fixed_option == 0 {
                return fail(OptlmStatus::BadArgument, "option ids are 1-based".into());
            }
            LatentMode::Fixed(fixed_option - 1)
        }
    };
    let decoding = if temperature > 0.0 {
        Decoding::Sample(temperature)
    } else {
        Decoding::Greedy
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match generate(plugin, &model.backbone, prefix, steps, &mode, decoding, &mut rng) {
        Ok((tokens, trace)) => {
            std::ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
            for (i, step) in trace.iter().enumerate() {
                *out_options.add(i) = (step.z + 1) as u32;
            }
            OptlmStatus::Ok
        }
        Err(e) => fail_err(e),
    }
}

/// Per-option view at the last position of `context`, as a JSON array of
/// `{option, weight, token}` records (weights from the policy, 1-based
/// option ids). The returned string must be released with
/// `optlm_string_free`.
///
/// # Safety
/// `model` must be live, `context` must hold `context_len` tokens, and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn optlm_option_table_json(
    model: *const OptlmModel,
    context: *const u32,
    context_len: size_t,
    out: *mut *mut c_char,
) -> OptlmStatus {
    if model.is_null() || context.is_null() || out.is_null() {
        return fail(OptlmStatus::BadArgument, "null pointer".into());
    }
    let model = &*model;
    let plugin = match &model.plugin {
        Some(p) => p,
        None => {
            return fail(OptlmStatus::Checkpoint, "checkpoint holds no plug-in".into())
        }
    };
    if context_len == 0 {
        return fail(OptlmStatus::BadArgument, "empty context".into());
    }
    let context = std::slice::from_raw_parts(context, context_len);
    let table = (|| -> optlm::error::Result<serde_json::Value> {
        let d = model.backbone.config.hidden_dim;
        let hs = optlm::backbone::hidden_states(&model.backbone, context)?;
        let h = &hs.data[(context_len - 1) * d..context_len * d];
        let dist = optlm::plugin::policy_latent(plugin, h);
        let mut rows = Vec::with_capacity(plugin.config.k);
        for z in 0..plugin.config.k {
            let assign = optlm::plugin::LatentAssignment::new(
                z,
                plugin.config.k,
                optlm::plugin::AssignmentSource::Forced,
            )?;
            let logits = optlm::plugin::biased_logits(plugin, &model.backbone, &assign, h)?;
            rows.push(serde_json::json!({
                "option": z + 1,
                "weight": dist.probs[z],
                "token": optlm::tape::argmax(&logits),
            }));
        }
        Ok(serde_json::Value::Array(rows))
    })();
    match table {
        Ok(v) => {
            let s = CString::new(v.to_string()).expect("JSON has no NUL");
            *out = s.into_raw();
            OptlmStatus::Ok
        }
        Err(e) => fail_err(e),
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn optlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn build_checkpoint(dir: &Path) -> std::path::PathBuf {
        use optlm::backbone::{BackboneConfig, BackboneParams};
        use optlm::plugin::{Estimator, OptionConfig, PluginParams};
        let bc = BackboneConfig {
            vocab_size: 16,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 12,
            tied_embeddings: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let backbone = BackboneParams::<f32>::init(&bc, &mut rng).unwrap();
        let oc = OptionConfig {
            k: 4,
            encoder_hidden: 8,
            decoder_hidden: 8,
            policy_hidden: 8,
            option_embed_dim: 4,
            estimator: Estimator::StraightThroughGumbel,
            gumbel_temperature: 1.0,
        };
        let plugin = PluginParams::init(&oc, bc.hidden_dim, &mut rng).unwrap();
        let config = optlm::train::TrainConfig {
            steps: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            kl: Default::default(),
            checkpoint_every: 0,
        };
        let state = optlm::train::TrainState::new(config, backbone, plugin).unwrap();
        let path = dir.join("model.ckpt");
        optlm::checkpoint::save_train_state(&path, &state).unwrap();
        path
    }

    #[test]
    fn load_generate_and_table_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let path = build_checkpoint(dir.path());
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut model: *mut OptlmModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(optlm_model_load(cpath.as_ptr(), &mut model), OptlmStatus::Ok);
            assert_eq!(optlm_vocab_size(model), 16);
            assert_eq!(optlm_option_count(model), 4);

            let prefix = [0u32, 3];
            let mut tokens = [0u32; 7];
            let mut options = [0u32; 5];
            let status = optlm_generate(
                model,
                prefix.as_ptr(),
                prefix.len(),
                5,
                OptlmLatentMode::Fixed,
                2,
                0.0,
                1,
                tokens.as_mut_ptr(),
                options.as_mut_ptr(),
            );
            assert_eq!(status, OptlmStatus::Ok);
            assert_eq!(&tokens[..2], &prefix);
            assert!(options.iter().all(|&o| o == 2));

            let mut json: *mut c_char = std::ptr::null_mut();
            let status =
                optlm_option_table_json(model, prefix.as_ptr(), prefix.len(), &mut json);
            assert_eq!(status, OptlmStatus::Ok);
            let text = CStr::from_ptr(json).to_str().unwrap().to_string();
            optlm_string_free(json);
            let rows: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
            assert_eq!(rows.len(), 4);
            assert_eq!(rows[0]["option"], 1);

            optlm_model_free(model);
        }
    }

    #[test]
    fn errors_surface_with_codes_and_messages() {
        unsafe {
            let mut model: *mut OptlmModel = std::ptr::null_mut();
            assert_eq!(
                optlm_model_load(std::ptr::null(), &mut model),
                OptlmStatus::BadArgument
            );
            let missing = CString::new("/nonexistent/nope.ckpt").unwrap();
            let status = optlm_model_load(missing.as_ptr(), &mut model);
            assert_eq!(status, OptlmStatus::Internal);

            let dir = tempfile::tempdir().unwrap();
            let junk = dir.path().join("junk.ckpt");
            std::fs::write(&junk, b"not a checkpoint").unwrap();
            let cjunk = CString::new(junk.to_str().unwrap()).unwrap();
            assert_eq!(
                optlm_model_load(cjunk.as_ptr(), &mut model),
                OptlmStatus::Checkpoint
            );
            let mut buf = [0i8; 256];
            let n = optlm_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
            assert!(n > 0);
            let msg = CStr::from_ptr(buf.as_ptr() as *const c_char).to_str().unwrap();
            assert!(msg.contains("checkpoint"), "{msg}");
        }
    }
}
