use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use skillab_ffi::*;

const TINY: &str = "[run]\nseed = 2\n[env]\nepisode_steps = 20\n[objective]\nz_max = 4\n\
[encoder]\nhidden = 8\n[policy]\nhidden = 8\nvalue_hidden = 8\n\
[ppo]\nrollouts_per_update = 2\nhorizon = 20\nepochs = 1\nminibatches = 2\n";

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        skillab_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn trainer(config: &str) -> *mut SkillabTrainer {
    let c = CString::new(config).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { skillab_trainer_new(c.as_ptr(), &mut t) }, SkillabStatus::Ok, "{}", last_error());
    t
}

fn path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn trainer_steps_match_across_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = path(&dir.path().join("t.ckpt"));
    unsafe {
        let a = trainer(TINY);
        let b = trainer(TINY);
        let (mut ra, mut rb) = (SkillabLogRow::default(), SkillabLogRow::default());
        assert_eq!(skillab_trainer_step(a, &mut ra), SkillabStatus::Ok);
        assert_eq!(skillab_trainer_step(b, &mut rb), SkillabStatus::Ok);
        assert_eq!(ra, rb);
        assert_eq!(skillab_trainer_save(a, ckpt.as_ptr()), SkillabStatus::Ok);

        let mut c = ptr::null_mut();
        assert_eq!(skillab_trainer_load(ckpt.as_ptr(), &mut c), SkillabStatus::Ok);
        assert_eq!(skillab_trainer_updates(c), 1);
        assert_eq!(skillab_trainer_step(a, &mut ra), SkillabStatus::Ok);
        assert_eq!(skillab_trainer_step(c, &mut rb), SkillabStatus::Ok);
        assert_eq!(ra, rb);
        assert_eq!(ra.update, 2);
        for t in [a, b, c] {
            skillab_trainer_free(t);
        }
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let bad = CString::new("[ppo]\nclip_ratoi = 1\n").unwrap();
        let mut t = ptr::null_mut();
        assert_eq!(skillab_trainer_new(bad.as_ptr(), &mut t), SkillabStatus::Config);
        assert!(t.is_null());
        assert!(last_error().contains("ppo.clip_ratoi"));

        assert_eq!(skillab_trainer_new(ptr::null(), &mut t), SkillabStatus::NullPointer);
        assert_eq!(skillab_trainer_step(ptr::null_mut(), ptr::null_mut()), SkillabStatus::NullPointer);
        let missing = CString::new("/nonexistent/run").unwrap();
        assert_eq!(skillab_agent_load(missing.as_ptr(), &mut ptr::null_mut()), SkillabStatus::Io);
        assert!(last_error().contains("/nonexistent/run"));

        let ok = trainer(TINY);
        assert!(last_error().is_empty());
        assert_eq!(skillab_last_error(ptr::null_mut(), 0), 1);
        skillab_trainer_free(ok);
        skillab_trainer_free(ptr::null_mut());
        skillab_agent_free(ptr::null_mut());
        assert_eq!(skillab_trainer_updates(ptr::null()), 0);

        let reach = trainer("[run]\ntask = reach\n[policy]\nhidden = 8\nvalue_hidden = 8\n");
        let mut agent = ptr::null_mut();
        assert_eq!(skillab_agent_from_trainer(reach, &mut agent), SkillabStatus::NoEncoder);
        skillab_trainer_free(reach);

        let name = CStr::from_ptr(skillab_status_name(SkillabStatus::Dimension));
        assert_eq!(name.to_str().unwrap(), "dimension mismatch");
    }
}

#[test]
fn agent_matches_library_encoder_and_dynamics() {
    unsafe {
        let t = trainer(TINY);
        let mut agent = ptr::null_mut();
        assert_eq!(skillab_agent_from_trainer(t, &mut agent), SkillabStatus::Ok);
        assert_eq!(skillab_agent_state_dim(agent), 4);
        assert_eq!(skillab_agent_skill_dim(agent), 2);

        let s = [0.3, -0.2, 0.5, 0.1];
        let mut phi = [0.0; 2];
        assert_eq!(skillab_agent_encode(agent, s.as_ptr(), 4, phi.as_mut_ptr(), 2), SkillabStatus::Ok);
        let ckpt = tempfile::tempdir().unwrap();
        let p = path(&ckpt.path().join("a.ckpt"));
        assert_eq!(skillab_trainer_save(t, p.as_ptr()), SkillabStatus::Ok);
        let state = skillab::lab::load_state(Path::new(p.to_str().unwrap())).unwrap();
        let want = skillab::skills::encode(
            state.encoder.as_ref().unwrap(),
            &skillab::env::EnvState::from_vector(skillab::env::EnvKind::PointMass, &s).unwrap(),
        )
        .unwrap();
        assert_eq!(phi.to_vec(), want);

        assert_eq!(skillab_agent_encode(agent, s.as_ptr(), 5, phi.as_mut_ptr(), 2), SkillabStatus::Dimension);

        assert_eq!(skillab_agent_reset(agent, 9), SkillabStatus::Ok);
        let mut before = [0.0; 4];
        assert_eq!(skillab_agent_state(agent, before.as_mut_ptr(), 4), SkillabStatus::Ok);
        let mut z = [0.0; 2];
        assert_eq!(skillab_agent_select_skill(agent, 2.0, 1.0, z.as_mut_ptr(), 2), SkillabStatus::Ok);
        assert!(z[0].hypot(z[1]) <= 4.0 + 1e-12);
        let mut action = [0.0; 2];
        assert_eq!(skillab_agent_step(agent, z.as_ptr(), 2, action.as_mut_ptr()), SkillabStatus::Ok);
        let mut after = [0.0; 4];
        assert_eq!(skillab_agent_state(agent, after.as_mut_ptr(), 4), SkillabStatus::Ok);
        let cfg = state.config.env_config();
        let start = skillab::env::EnvState::from_vector(cfg.kind, &before).unwrap();
        let next = skillab::env::step_env(&cfg, &start, action).unwrap().next_state;
        assert_eq!(next.vector(), after.to_vec());

        let nan = [f64::NAN, 0.0];
        assert_eq!(skillab_agent_step(agent, nan.as_ptr(), 2, ptr::null_mut()), SkillabStatus::Numeric);
        skillab_agent_free(agent);
        skillab_trainer_free(t);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = target_dir().join("libskillab_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .output()
        .expect("running the C compiler");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).arg(dir.path().join("c.ckpt")).output().unwrap();
    assert!(
        run.status.success(),
        "{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout), "ok\n");
}
