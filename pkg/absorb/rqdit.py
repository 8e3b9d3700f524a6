#!/usr/bin/env python
"""
A desk-scale RQDiT denoiser written with explicit numpy tensor operations.

Clean-path and noisy-path codes are embedded with the (frozen) codebook
entries, the mask mapping to the zero vector, and lifted to the hidden
dimension by separate MLPs. A frame-axis DiT processes the depth-sum of
the clean hiddens, conditioned through adaLN-zero on the depth-sum of the
noisy hiddens. Its output is added to the clean hidden at every depth and
a depth-axis DiT then runs on each frame independently, conditioned on the
per-position noisy hiddens. An output MLP yields K logits per position.

Every layer has a hand-written backward pass; `backward` returns exact
gradients for all parameters.
"""
import logging
from collections import OrderedDict as odict

import numpy as np
from scipy.special import expit, softmax

from absorb import __version__
from absorb.models import ConditionalModel
from absorb.utils import constants
from absorb.utils import fileio
from absorb.utils.rng import get_rng
from absorb.utils.parser import setdefaults
from absorb.utils.errors import ConfigurationError, UsageError, NumericError, FormatError

DITS = ('frame','depth')

class RQDiTConfig(object):
    _defaults = odict([
        ('hidden_dim', 32),
        ('n_layers', 2),
        ('n_heads', 2),
        ('mlp_ratio', 4),
        ('K', None),
        ('D', None),
        ('H', None),
        ('rope_base', constants.ROPE_BASE),
        ('ln_eps', 1e-6),
    ])

    def __init__(self, **kwargs):
        kwargs = setdefaults(kwargs, self._defaults)
        for k in self._defaults:
            setattr(self, k, kwargs[k])
        for k in ('K','D','H'):
            if getattr(self,k) is None:
                msg = "RQDiTConfig requires %s"%k
                raise ConfigurationError(msg)
        if self.hidden_dim % self.n_heads:
            msg = "hidden_dim %i not divisible by n_heads %i"%(self.hidden_dim,self.n_heads)
            raise ConfigurationError(msg)
        if self.head_dim % 2:
            msg = "Head dimension %i must be even for rotary embedding"%self.head_dim
            raise ConfigurationError(msg)

    @property
    def head_dim(self):
        return self.hidden_dim // self.n_heads

    @property
    def mlp_dim(self):
        return self.hidden_dim * self.mlp_ratio

    @classmethod
    def preset(cls, name, **kwargs):
        """ Named model size ('desk', 'xs', 's', 'm', 'l', 'xl'). """
        if name not in constants.PRESETS:
            msg = "Unrecognized preset: %s"%name
            raise ConfigurationError(msg)
        return cls(**setdefaults(kwargs, constants.PRESETS[name]))

    def to_dict(self):
        return odict([(k,getattr(self,k)) for k in self._defaults])

############################################################
# Layers: each forward returns (out, cache); each backward consumes it.

def linear(x, w, b):
    return x.dot(w) + b, x

def linear_backward(dout, cache, w):
    x = cache
    dw = x.reshape(-1, x.shape[-1]).T.dot(dout.reshape(-1, dout.shape[-1]))
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout.dot(w.T), dw, db

def silu(x):
    s = expit(x)
    return x*s, (x, s)

def silu_backward(dout, cache):
    x, s = cache
    return dout*s*(1 + x*(1 - s))

def layernorm(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1./np.sqrt(var + eps)
    xhat = (x - mu)*inv
    return xhat, (xhat, inv)

def layernorm_backward(dxhat, cache):
    xhat, inv = cache
    mean = dxhat.mean(axis=-1, keepdims=True)
    proj = (dxhat*xhat).mean(axis=-1, keepdims=True)
    return inv*(dxhat - mean - xhat*proj)

def rope_apply(x, positions, base=constants.ROPE_BASE):
    """Rotary position embedding on the last axis.

    Coordinates (2d, 2d+1) are rotated by position * base^(-2d/head_dim).
    `x` has shape (..., S, head_dim) and `positions` shape (S,). Rotating
    by -positions inverts the map.
    """
    x = np.asarray(x, dtype=np.float64)
    hd = x.shape[-1]
    if hd % 2:
        msg = "Head dimension %i must be even for rotary embedding"%hd
        raise ConfigurationError(msg)
    theta = base**(-2.*np.arange(hd//2)/hd)
    angle = np.asarray(positions, dtype=np.float64)[:,None]*theta[None,:]
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = x[...,0::2], x[...,1::2]
    out = np.empty_like(x)
    out[...,0::2] = even*cos - odd*sin
    out[...,1::2] = even*sin + odd*cos
    return out

def attention(a, p, prefix, n_heads, use_rope=True, base=constants.ROPE_BASE):
    """ Bidirectional multi-head self-attention over axis -2. """
    N, S, h = a.shape
    hd = h // n_heads
    pos = np.arange(S)

    def heads(x):
        return x.reshape(N, S, n_heads, hd).transpose(0, 2, 1, 3)

    q, cq = linear(a, p[prefix+'wq'], p[prefix+'bq'])
    k, ck = linear(a, p[prefix+'wk'], p[prefix+'bk'])
    v, cv = linear(a, p[prefix+'wv'], p[prefix+'bv'])
    q, k, v = heads(q), heads(k), heads(v)
    if use_rope:
        q, k = rope_apply(q, pos, base), rope_apply(k, pos, base)
    scale = 1./np.sqrt(hd)
    scores = np.matmul(q, k.transpose(0, 1, 3, 2))*scale
    scores -= scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    o = np.matmul(P, v).transpose(0, 2, 1, 3).reshape(N, S, h)
    out, co = linear(o, p[prefix+'wo'], p[prefix+'bo'])
    cache = (cq, ck, cv, co, q, k, v, P, scale, use_rope, base)
    return out, cache

def attention_backward(dout, cache, p, prefix, n_heads, grads):
    cq, ck, cv, co, q, k, v, P, scale, use_rope, base = cache
    N, nh, S, hd = q.shape
    pos = np.arange(S)

    do, grads[prefix+'wo'], grads[prefix+'bo'] = linear_backward(dout, co, p[prefix+'wo'])
    do = do.reshape(N, S, nh, hd).transpose(0, 2, 1, 3)
    dP = np.matmul(do, v.transpose(0, 1, 3, 2))
    dv = np.matmul(P.transpose(0, 1, 3, 2), do)
    dscores = P*(dP - (dP*P).sum(axis=-1, keepdims=True))*scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
    if use_rope:
        dq, dk = rope_apply(dq, -pos, base), rope_apply(dk, -pos, base)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(N, S, nh*hd)

    da = 0.
    for name,d,c in (('q',dq,cq),('k',dk,ck),('v',dv,cv)):
        dx, grads[prefix+'w'+name], grads[prefix+'b'+name] = \
            linear_backward(merge(d), c, p[prefix+'w'+name])
        da = da + dx
    return da

def block(x, c, p, prefix, cfg, use_rope=True):
    """ Pre-norm DiT block with adaLN-zero modulation from `c`. """
    sc, c_silu = silu(c)
    mod, c_mod = linear(sc, p[prefix+'mod.w'], p[prefix+'mod.b'])
    shift1, scale1, gate1, shift2, scale2, gate2 = np.split(mod, 6, axis=-1)

    n1, c_ln1 = layernorm(x, cfg.ln_eps)
    a = n1*(1 + scale1) + shift1
    att, c_att = attention(a, p, prefix+'attn.', cfg.n_heads, use_rope, cfg.rope_base)
    x1 = x + gate1*att

    n2, c_ln2 = layernorm(x1, cfg.ln_eps)
    b = n2*(1 + scale2) + shift2
    u, c_w1 = linear(b, p[prefix+'mlp.w1'], p[prefix+'mlp.b1'])
    g, c_act = silu(u)
    m, c_w2 = linear(g, p[prefix+'mlp.w2'], p[prefix+'mlp.b2'])
    out = x1 + gate2*m

    cache = (c_silu, c_mod, (shift1, scale1, gate1, shift2, scale2, gate2),
             n1, c_ln1, att, c_att, n2, c_ln2, c_w1, c_act, c_w2, m)
    return out, cache

def block_backward(dout, cache, p, prefix, cfg, grads):
    (c_silu, c_mod, (shift1, scale1, gate1, shift2, scale2, gate2),
     n1, c_ln1, att, c_att, n2, c_ln2, c_w1, c_act, c_w2, m) = cache

    dx1 = dout.copy()
    dgate2 = dout*m
    dm = dout*gate2
    dg, grads[prefix+'mlp.w2'], grads[prefix+'mlp.b2'] = \
        linear_backward(dm, c_w2, p[prefix+'mlp.w2'])
    du = silu_backward(dg, c_act)
    db, grads[prefix+'mlp.w1'], grads[prefix+'mlp.b1'] = \
        linear_backward(du, c_w1, p[prefix+'mlp.w1'])
    dscale2 = db*n2
    dshift2 = db
    dx1 += layernorm_backward(db*(1 + scale2), c_ln2)

    dgate1 = dx1*att
    datt = dx1*gate1
    da = attention_backward(datt, c_att, p, prefix+'attn.', cfg.n_heads, grads)
    dscale1 = da*n1
    dshift1 = da
    dx = dx1 + layernorm_backward(da*(1 + scale1), c_ln1)

    dmod = np.concatenate([dshift1, dscale1, dgate1, dshift2, dscale2, dgate2], axis=-1)
    dsc, grads[prefix+'mod.w'], grads[prefix+'mod.b'] = \
        linear_backward(dmod, c_mod, p[prefix+'mod.w'])
    dc = silu_backward(dsc, c_silu)
    return dx, dc

def mlp(x, p, prefix):
    u, c1 = linear(x, p[prefix+'w1'], p[prefix+'b1'])
    g, ca = silu(u)
    out, c2 = linear(g, p[prefix+'w2'], p[prefix+'b2'])
    return out, (c1, ca, c2)

def mlp_backward(dout, cache, p, prefix, grads):
    c1, ca, c2 = cache
    dg, grads[prefix+'w2'], grads[prefix+'b2'] = linear_backward(dout, c2, p[prefix+'w2'])
    du = silu_backward(dg, ca)
    dx, grads[prefix+'w1'], grads[prefix+'b1'] = linear_backward(du, c1, p[prefix+'w1'])
    return dx

def embed_codes(grid, books):
    """Codebook-entry embedding; the mask symbol K maps to zeros.

    Parameters:
    -----------
    grid  : Grid of shape (..., L, D) with entries in [0, K]
    books : CodebookSet

    Returns:
    --------
    emb   : Array of shape (..., L, D, H)
    """
    grid = np.asarray(grid)
    table = np.concatenate([books.entries, np.zeros((books.D,1,books.H))], axis=1)
    return table[np.arange(grid.shape[-1]), grid]

def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        msg = "Non-finite activations in layer '%s'"%layer
        raise NumericError(msg)

############################################################

class RQDiT(ConditionalModel):
    """ Frame-axis and depth-axis DiTs over RVQ code grids. """
    name = 'rqdit'

    def __init__(self, config, books, seed=0):
        if (config.K,config.D,config.H) != (books.K,books.D,books.H):
            msg = "Model (K=%s, D=%s, H=%s) does not match codebooks (K=%i, D=%i, H=%i)"%(
                config.K,config.D,config.H,books.K,books.D,books.H)
            raise ConfigurationError(msg)
        super(RQDiT,self).__init__(config.K, config.D)
        self.config = config
        self.books = books
        self.use_rope = True
        self.last_logits = None
        self.params = self.init_params(seed)
        logging.info("RQDiT: %i parameters (hidden %i, %i layers, %i heads)"%(
            self.nparams, config.hidden_dim, config.n_layers, config.n_heads))

    @property
    def nparams(self):
        return int(sum(v.size for v in self.params.values()))

    def init_params(self, seed=0):
        """ Scaled-normal weights, zero biases, zero adaLN modulation. """
        cfg = self.config
        rng = get_rng(seed)
        h, m = cfg.hidden_dim, cfg.mlp_dim
        p = odict()

        for path in ('clean_in.','noisy_in.'):
            p[path+'w1'] = rng.normal(0, 1./np.sqrt(cfg.H), (cfg.H,h))
            p[path+'b1'] = np.zeros(h)
            p[path+'w2'] = rng.normal(0, 1./np.sqrt(h), (h,h))
            p[path+'b2'] = np.zeros(h)
        for dit in DITS:
            for l in range(cfg.n_layers):
                pre = '%s.%i.'%(dit,l)
                p[pre+'mod.w'] = np.zeros((h,6*h))
                p[pre+'mod.b'] = np.zeros(6*h)
                for name in ('q','k','v','o'):
                    p[pre+'attn.w'+name] = rng.normal(0, 1./np.sqrt(h), (h,h))
                    p[pre+'attn.b'+name] = np.zeros(h)
                p[pre+'mlp.w1'] = rng.normal(0, 1./np.sqrt(h), (h,m))
                p[pre+'mlp.b1'] = np.zeros(m)
                p[pre+'mlp.w2'] = rng.normal(0, 1./np.sqrt(m), (m,h))
                p[pre+'mlp.b2'] = np.zeros(h)
        p['head.w1'] = rng.normal(0, 1./np.sqrt(h), (h,h))
        p['head.b1'] = np.zeros(h)
        p['head.w2'] = rng.normal(0, 1./np.sqrt(h), (h,cfg.K))
        p['head.b2'] = np.zeros(cfg.K)
        return p

    def randomize(self, seed=0, scale=0.5):
        """ Perturb every parameter (including zero-initialized ones). """
        rng = get_rng(seed)
        for k,v in self.params.items():
            self.params[k] = v + scale*rng.normal(0, 1./np.sqrt(max(v.shape[0],1)), v.shape)
        return self

    def run_dit(self, dit, x, c, caches=None):
        """ Apply the blocks of one DiT to (N, S, h) sequences. """
        out = x
        for l in range(self.config.n_layers):
            pre = '%s.%i.'%(dit,l)
            out, cache = block(out, c, self.params, pre, self.config, self.use_rope)
            _check_finite(out, pre.rstrip('.'))
            if caches is not None: caches.append(cache)
        return out

    def run_dit_backward(self, dit, dout, caches, grads):
        dx, dc = dout, 0.
        for l in reversed(range(self.config.n_layers)):
            pre = '%s.%i.'%(dit,l)
            dx, dcl = block_backward(dx, caches[l], self.params, pre, self.config, grads)
            dc = dc + dcl
        return dx, dc

    def forward(self, masked, noisy, frame_override=None):
        """Probabilities over clean codes for (optionally batched) grids.

        Parameters:
        -----------
        masked : Masked clean grid(s) of shape ([N,] L, D)
        noisy  : Noisy grid(s) of the same shape
        frame_override : Test hook replacing the frame-DiT output, shape
                         ([N,] L, hidden_dim)

        Returns:
        --------
        probs  : Array of shape ([N,] L, D, K)
        """
        masked, noisy = self._inputs(masked, noisy)
        single = masked.ndim == 2
        if single:
            masked, noisy = masked[None], noisy[None]
            if frame_override is not None: frame_override = frame_override[None]
        probs = self.forward_embedded(embed_codes(masked, self.books),
                                      embed_codes(noisy, self.books),
                                      frame_override)
        return probs[0] if single else probs

    def forward_embedded(self, clean_emb, noisy_emb, frame_override=None):
        """ Forward pass from (N, L, D, H) clean and noisy embeddings. """
        cfg = self.config
        p = self.params
        N, L, D, _ = clean_emb.shape
        h = cfg.hidden_dim

        hc, c_cin = mlp(clean_emb, p, 'clean_in.')
        hn, c_nin = mlp(noisy_emb, p, 'noisy_in.')
        _check_finite(hc, 'clean_in')
        _check_finite(hn, 'noisy_in')

        frame_caches = []
        if frame_override is None:
            yf = self.run_dit('frame', hc.sum(axis=2), hn.sum(axis=2), frame_caches)
        else:
            yf = np.asarray(frame_override, dtype=np.float64)
            frame_caches = None

        depth_caches = []
        xd = (hc + yf[:,:,None,:]).reshape(N*L, D, h)
        yd = self.run_dit('depth', xd, hn.reshape(N*L, D, h), depth_caches)
        yd = yd.reshape(N, L, D, h)

        nh, c_ln = layernorm(yd, cfg.ln_eps)
        logits, c_head = mlp(nh, p, 'head.')
        _check_finite(logits, 'head')

        self.cache = (N, L, D, c_cin, c_nin, frame_caches, depth_caches, c_ln, c_head)
        self.last_logits = logits
        return softmax(logits, axis=-1)

    def backward(self, dlogits):
        """Exact gradients of a scalar loss given dloss/dlogits.

        Codebook entries are frozen and receive no gradient.
        """
        if self.cache is None:
            raise UsageError("backward requires a forward pass with retained activations")
        N, L, D, c_cin, c_nin, frame_caches, depth_caches, c_ln, c_head = self.cache
        h = self.config.hidden_dim
        p = self.params
        grads = odict()

        dlogits = np.asarray(dlogits, dtype=np.float64).reshape(N, L, D, -1)
        dnh = mlp_backward(dlogits, c_head, p, 'head.', grads)
        dyd = layernorm_backward(dnh, c_ln).reshape(N*L, D, h)

        dxd, dcd = self.run_dit_backward('depth', dyd, depth_caches, grads)
        dxd = dxd.reshape(N, L, D, h)
        dhc = dxd.copy()
        dhn = np.asarray(dcd).reshape(N, L, D, h).copy()

        if frame_caches is not None:
            dyf = dxd.sum(axis=2)
            dxf, dcf = self.run_dit_backward('frame', dyf, frame_caches, grads)
            dhc += dxf[:,:,None,:]
            dhn += np.asarray(dcf)[:,:,None,:]
        else:
            for dit_key in [k for k in p if k.startswith('frame.')]:
                grads[dit_key] = np.zeros_like(p[dit_key])

        mlp_backward(dhc, c_cin, p, 'clean_in.', grads)
        mlp_backward(dhn, c_nin, p, 'noisy_in.', grads)
        return odict([(k,grads[k]) for k in p])

    ########################################################
    # Checkpoints

    def write(self, filename):
        """ Flat little-endian float32 payload plus a JSON manifest. """
        manifest = odict([
            ('absorb', __version__),
            ('model', self.name),
            ('config', self.config.to_dict()),
            ('nparams', self.nparams),
        ])
        logging.debug('Writing %s...'%filename)
        return fileio.write_payload(filename, self.params, '<f4', manifest)

    @classmethod
    def read(cls, filename, books):
        arrays, manifest = fileio.read_payload(filename)
        if manifest.get('model') != cls.name:
            msg = "Checkpoint field 'model': %s"%manifest.get('model')
            raise FormatError(msg)
        config = RQDiTConfig(**manifest['config'])
        self = cls(config, books)
        for k in self.params:
            if k not in arrays:
                msg = "Checkpoint tensor '%s' missing"%k
                raise FormatError(msg)
            if arrays[k].shape != self.params[k].shape:
                msg = "Checkpoint tensor '%s' has shape %s; expected %s"%(
                    k,arrays[k].shape,self.params[k].shape)
                raise FormatError(msg)
            self.params[k] = arrays[k].astype(np.float64)
        return self

############################################################
# Optimization

class AdamState(object):
    """ First/second moment estimates and step count. """
    def __init__(self, params):
        self.m = odict([(k,np.zeros_like(v)) for k,v in params.items()])
        self.v = odict([(k,np.zeros_like(v)) for k,v in params.items()])
        self.t = 0

def global_norm(grads):
    return float(np.sqrt(sum(np.sum(g**2) for g in grads.values())))

def optimizer_step(params, grads, state, lr=constants.LEARNING_RATE,
                   weight_decay=constants.WEIGHT_DECAY, clip_norm=constants.CLIP_NORM,
                   betas=constants.BETAS, eps=constants.ADAM_EPS):
    """Clipped Adam update with decoupled weight decay, in place.

    Parameters:
    -----------
    params       : Ordered dict of parameter arrays (updated in place)
    grads        : Gradients with the same keys
    state        : AdamState
    lr           : Learning rate
    weight_decay : Decoupled weight decay coefficient
    clip_norm    : Global l2 clipping norm (None or <= 0 disables)
    betas, eps   : Adam moment coefficients and denominator offset

    Returns:
    --------
    grad_norm    : The pre-clipping global gradient norm
    """
    norm = global_norm(grads)
    scale = 1.
    if clip_norm and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm/norm
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k,p in params.items():
        g = grads.get(k)
        if g is None: continue
        g = g*scale
        state.m[k] = b1*state.m[k] + (1 - b1)*g
        state.v[k] = b2*state.v[k] + (1 - b2)*g*g
        update = (state.m[k]/c1)/(np.sqrt(state.v[k]/c2) + eps)
        if weight_decay: p -= lr*weight_decay*p
        p -= lr*update
    return norm

def gradient_check(model, masked, noisy, step=1e-4, weights=None, seed=0, names=None,
                   max_entries=None):
    """Compare analytic gradients against central finite differences.

    The scalar differentiated is sum(weights * logits) with random Gaussian weights.
    With `max_entries`, only that many randomly chosen entries per tensor
    are checked.

    Returns:
    --------
    errors : Ordered dict of parameter name -> relative error
             ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
    """
    rng = get_rng(seed)
    model.forward(masked, noisy)
    N, L, D = model.cache[:3]
    if weights is None:
        weights = rng.normal(size=(N, L, D, model.K))

    def objective():
        model.forward(masked, noisy)
        return np.sum(weights*model.last_logits)

    model.forward(masked, noisy)
    analytic = model.backward(weights)

    errors = odict()
    for name in (names or list(model.params)):
        param = model.params[name]
        flat = param.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.zeros(len(entries))
        for n,i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            numeric[n] = (fp - fm)/(2*step)
        a = analytic[name].reshape(-1)[entries]
        denom = max(np.linalg.norm(a) + np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric)/denom)
        if not np.isfinite(errors[name]): errors[name] = np.inf
    return errors

if __name__ == "__main__":
    import argparse
    description = __doc__
    parser = argparse.ArgumentParser(description=description)
    args = parser.parse_args()
