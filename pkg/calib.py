# Calibration scratch script (not part of the package).
import time, sys, numpy as np, torch
from pathlib import Path
import warnings; warnings.filterwarnings('ignore')

from avsep import toyworld as tw
from avsep.extractors import pretrain_extractors, FrozenExtractors
from avsep.training import TrainConfig, train, save_checkpoint, load_checkpoint
from avsep.correlation import TrainWeights, train_origin_probe
from avsep.separator import separate
from avsep.metrics import si_snr

CACHE = Path('/tmp/calib')
CACHE.mkdir(exist_ok=True)

def get_pool():
    return tw.build_pool(16, 15, seed=11)

def get_extractors(pool):
    p = CACHE / 'extractors.ckpt'
    if p.exists():
        return load_checkpoint(p)
    ex = pretrain_extractors(pool, seed=0)
    save_checkpoint(ex, p)
    return ex

def get_model(pool, ex, mode, **kw):
    tag = kw.pop('tag', mode)
    p = CACHE / f'{tag}.ckpt'
    if p.exists():
        return load_checkpoint(p)
    cfg = TrainConfig(mode=mode, steps=600, batch_size=6, seed=1, eval_every=200, **kw)
    t0 = time.perf_counter()
    params, disc, log = train(pool, ex, cfg)
    vals = [e for e in log.entries if e.val_si_snr is not None]
    print(f'{tag}: {time.perf_counter()-t0:.0f}s ' +
          ' '.join(f'{e.step}:{e.val_si_snr:+.2f}' for e in vals))
    save_checkpoint(params, p)
    if disc is not None:
        save_checkpoint(disc, CACHE / f'{tag}_disc.ckpt')
    return params

def test_mixtures(pool, n=128, seed=303):
    rng = np.random.default_rng(seed)
    _, val = pool.split()
    cases = rng.choice(3, size=n, p=(0.5, 0.25, 0.25))
    out = []
    for c in cases:
        out.append(tw.sample_mixture(pool, rng, tw.HARD_CASES[c], val))
    return out

def probe_accuracy(pool, ex, params, mixtures, seed=5):
    i_v, i_a = [], []
    with torch.no_grad():
        for m in mixtures:
            est = separate(params, m.mixture, m.target.visuals)
            i_a.append(ex.embed_audio_id(torch.from_numpy(est.samples)).numpy())
            i_v.append(ex.embed_visual_id(torch.from_numpy(m.target.visuals.face_stream)).numpy())
    order = np.random.default_rng(seed).permutation(len(i_a))
    i_a = np.array(i_a)[order]; i_v = np.array(i_v)[order]
    _, acc = train_origin_probe(i_v, i_a, seed=seed)
    return acc

def mean_sisnr(params, mixtures):
    return float(np.mean([si_snr(m.target.audio, separate(params, m.mixture, m.target.visuals))
                          for m in mixtures]))

def scatter_rows(pool, ex, params, mixtures, seed=77):
    # one pos + one neg pair per mixture
    rng = np.random.default_rng(seed)
    rows = []
    _, val = pool.split()
    with torch.no_grad():
        for m in mixtures:
            est = separate(params, m.mixture, m.target.visuals)
            est_t = torch.from_numpy(est.samples)
            i_a = ex.embed_audio_id(est_t).numpy()
            p_a = ex.embed_audio_ph(est_t).numpy()
            # positive: sibling rendition, same speaker + same sentence
            sib_seed = int(rng.integers(2**31))
            sib = tw.synth_utterance(pool.speaker(m.target.speaker_id), m.target.phonemes,
                                     pool.config, seed=sib_seed)
            # negative: different speaker, different sentence
            cands = [u for u in val if u.speaker_id != m.target.speaker_id
                     and u.phonemes != m.target.phonemes]
            neg = cands[rng.integers(len(cands))]
            for kind, other in (('pos', sib), ('neg', neg)):
                i_v = ex.embed_visual_id(torch.from_numpy(other.visuals.face_stream)).numpy()
                p_v = ex.embed_visual_ph(torch.from_numpy(other.visuals.lip_stream)).numpy()
                rows.append((kind, float(i_a @ i_v), float(p_a @ p_v)))
    return rows

def auc(rows):
    pos = [(a+b)/2 for k,a,b in rows if k=='pos']
    neg = [(a+b)/2 for k,a,b in rows if k=='neg']
    pos, neg = np.array(pos), np.array(neg)
    gt = (pos[:,None] > neg[None,:]).mean()
    eq = (pos[:,None] == neg[None,:]).mean()
    return float(gt + 0.5*eq)

if __name__ == '__main__':
    which = sys.argv[1] if len(sys.argv) > 1 else 'all'
    pool = get_pool()
    ex = get_extractors(pool)
    base = get_model(pool, ex, 'baseline', warmup_steps=200)
    trip = get_model(pool, ex, 'triplet', warmup_steps=200)
    adv = get_model(pool, ex, 'adversarial', warmup_steps=200)
    mixtures = test_mixtures(pool)
    if which in ('all', 'sisnr'):
        t0=time.perf_counter()
        for name, m in (('baseline', base), ('triplet', trip), ('adversarial', adv)):
            print(f'mean si_snr {name}: {mean_sisnr(m, mixtures):+.3f}')
        print(f'(eval time {time.perf_counter()-t0:.0f}s)')
    if which in ('all', 'probe'):
        for name, m in (('baseline', base), ('adversarial', adv)):
            print(f'probe acc {name}: {probe_accuracy(pool, ex, m, mixtures):.3f}')
    if which in ('all', 'auc'):
        for name, m in (('baseline', base), ('triplet', trip), ('adversarial', adv)):
            print(f'AUC {name}: {auc(scatter_rows(pool, ex, m, mixtures)):.3f}')
